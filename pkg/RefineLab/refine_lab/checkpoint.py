#!/usr/bin/env python3
# checkpoint.py

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional

import h5py
import numpy as np
import torch
import torch.nn as nn

from .config import RunConfig
from .errors import CheckpointError
from .model import RefineTransformer
from .optim import RefineOptimizer

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1


def _to_numpy(t: torch.Tensor) -> np.ndarray:
    return np.ascontiguousarray(t.detach().cpu().numpy())


def array_checksum(arrays: Dict[str, np.ndarray]) -> str:
    """sha256 over names, dtypes, shapes and bytes in sorted name order"""
    hasher = hashlib.sha256()
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        hasher.update(name.encode())
        hasher.update(arr.dtype.str.encode())
        hasher.update(repr(arr.shape).encode())
        hasher.update(arr.tobytes())
    return hasher.hexdigest()


@dataclass
class Checkpoint:
    config: RunConfig
    step: int
    model_state: Dict[str, np.ndarray]
    optim_state: Dict[int, Dict[str, np.ndarray]] = field(default_factory=dict)
    optimizer_groups: List[Dict[str, Any]] = field(default_factory=list)
    scheduler_state: Dict[str, Any] = field(default_factory=dict)
    rng_states: Dict[str, np.ndarray] = field(default_factory=dict)

    def build_model(self) -> RefineTransformer:
        """Fresh model from the echoed config with the stored weights"""
        model = RefineTransformer(self.config.model.resolved(self.config.task))
        model = model.to(getattr(torch, self.config.dtype))
        self.restore_model(model)
        return model

    def restore_model(self, model: nn.Module) -> None:
        expected = model.state_dict()
        if set(expected) != set(self.model_state):
            missing = sorted(set(expected) ^ set(self.model_state))
            raise CheckpointError(f"Checkpoint parameters do not match the model: {missing[:5]}")
        for name, tensor in expected.items():
            if tuple(tensor.shape) != self.model_state[name].shape:
                raise CheckpointError(
                    f"Shape mismatch for {name}: checkpoint {self.model_state[name].shape}, model {tuple(tensor.shape)}"
                )
        model.load_state_dict({name: torch.from_numpy(arr.copy()) for name, arr in self.model_state.items()})

    def restore_optimizer(self, optimizer: RefineOptimizer) -> None:
        state = {
            "state": {idx: {slot: torch.from_numpy(np.array(arr)) for slot, arr in slots.items()}
                      for idx, slots in self.optim_state.items()},
            "param_groups": self.optimizer_groups,
        }
        optimizer.load_state_dict({"optimizer": state, "scheduler": self.scheduler_state})


def save_checkpoint(path: Path, model: nn.Module, config: RunConfig, step: int,
                    optimizer: Optional[RefineOptimizer] = None,
                    rng_states: Optional[Dict[str, torch.Tensor]] = None) -> Path:
    """Write model, optimizer, scheduler and RNG state to one HDF5 file"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)

    arrays: Dict[str, np.ndarray] = {
        f"model::{name}": _to_numpy(tensor) for name, tensor in model.state_dict().items()
    }
    groups: List[Dict[str, Any]] = []
    scheduler_state: Dict[str, Any] = {}
    if optimizer is not None:
        opt_state = optimizer.state_dict()
        for idx, slots in opt_state["optimizer"]["state"].items():
            for slot, value in slots.items():
                arrays[f"optim::{idx}::{slot}"] = _to_numpy(torch.as_tensor(value))
        groups = opt_state["optimizer"]["param_groups"]
        scheduler_state = opt_state["scheduler"]
    for stream, state in (rng_states or {}).items():
        arrays[f"rng::{stream}"] = _to_numpy(state)

    with h5py.File(path, "w") as f:
        f.attrs["format_version"] = FORMAT_VERSION
        f.attrs["config_json"] = config.to_json()
        f.attrs["step"] = step
        f.attrs["optimizer_groups_json"] = json.dumps(groups, sort_keys=True)
        f.attrs["scheduler_json"] = json.dumps(scheduler_state, sort_keys=True)
        f.attrs["checksum"] = array_checksum(arrays)
        for name in sorted(arrays):
            f.create_dataset(name, data=arrays[name], track_times=False)

    logger.info(f"Saved checkpoint at step {step} to {path}")
    return path


def load_checkpoint(path: Path) -> Checkpoint:
    """Read and verify a checkpoint (version and checksum)"""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Checkpoint not found: {path}")
    try:
        with h5py.File(path, "r") as f:
            version = int(f.attrs.get("format_version", -1))
            if version != FORMAT_VERSION:
                raise CheckpointError(f"Unsupported checkpoint version {version} (expected {FORMAT_VERSION})")
            arrays = {name: np.asarray(f[name][()]) for name in f.keys()}
            attrs = {key: f.attrs[key] for key in f.attrs.keys()}
    except OSError as e:
        raise CheckpointError(f"Unreadable checkpoint {path}: {e}") from e

    if array_checksum(arrays) != str(attrs["checksum"]):
        raise CheckpointError(f"Checksum mismatch in {path}")

    model_state, optim_state, rng_states = {}, {}, {}
    for name, arr in arrays.items():
        kind, _, rest = name.partition("::")
        if kind == "model":
            model_state[rest] = arr
        elif kind == "optim":
            idx, slot = rest.split("::")
            optim_state.setdefault(int(idx), {})[slot] = arr
        elif kind == "rng":
            rng_states[rest] = arr

    return Checkpoint(
        config=RunConfig.model_validate_json(str(attrs["config_json"])),
        step=int(attrs["step"]),
        model_state=model_state,
        optim_state=optim_state,
        optimizer_groups=json.loads(str(attrs["optimizer_groups_json"])),
        scheduler_state=json.loads(str(attrs["scheduler_json"])),
        rng_states=rng_states,
    )

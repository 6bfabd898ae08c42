#!/usr/bin/env python3
# run_manager.py

import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import pandas as pd

from .config import RunConfig
from .errors import ConfigError

LOG_FORMAT = '%(asctime)s - %(levelname)s - %(message)s'


def setup_logging(level: str = "INFO", log_file: Optional[Path] = None) -> None:
    """Console logging, plus a file handler when a run directory exists"""
    handlers: List[logging.Handler] = [logging.StreamHandler()]
    if log_file is not None:
        handlers.insert(0, logging.FileHandler(log_file))
    logging.basicConfig(level=getattr(logging, level.upper(), logging.INFO), format=LOG_FORMAT,
                        handlers=handlers, force=True)


@dataclass
class RunState:
    latest_checkpoint: Optional[str] = None
    step: int = 0
    dataset_hash: Optional[str] = None
    seed: Optional[int] = None


class RunManager:
    def __init__(self, run_dir: Path, level: str = "INFO"):
        """
        Initialize a run directory

        Args:
            run_dir: Directory holding config echo, state, logs and checkpoints
            level: Logging level name
        """
        self.run_dir = Path(run_dir)
        self.checkpoint_dir = self.run_dir / "checkpoints"
        self.state_file = self.run_dir / "run_state.json"
        self.config_file = self.run_dir / "config.json"
        self.train_log = self.run_dir / "train_log.csv"
        self.metrics_file = self.run_dir / "metrics.csv"

        # Create directory structure
        self.checkpoint_dir.mkdir(parents=True, exist_ok=True)

        setup_logging(level, self.run_dir / "run.log")
        self.logger = logging.getLogger(__name__)
        self.state = self._load_state()

    def _load_state(self) -> RunState:
        """Load run state from disk"""
        if self.state_file.exists():
            with open(self.state_file) as f:
                return RunState(**json.load(f))
        return RunState()

    def save_state(self) -> None:
        """Save run state to disk"""
        with open(self.state_file, 'w') as f:
            json.dump(asdict(self.state), f, indent=4)

    def write_config(self, config: RunConfig) -> None:
        """Echo the config; an existing run may only change train.steps"""
        current = json.loads(config.to_json())
        if self.config_file.exists():
            with open(self.config_file) as f:
                previous = json.load(f)
            for snapshot in (previous, current):
                snapshot.get("train", {}).pop("steps", None)
            if previous != current:
                raise ConfigError(f"{self.config_file} was written with a different configuration")
        with open(self.config_file, 'w') as f:
            f.write(config.to_json())

    def bind_dataset(self, dataset_hash: str, seed: int) -> None:
        """Record the training data; resuming on different data is refused"""
        if self.state.dataset_hash not in (None, dataset_hash):
            raise ConfigError(
                f"Run was trained on dataset {self.state.dataset_hash}, got {dataset_hash}"
            )
        self.state.dataset_hash = dataset_hash
        self.state.seed = seed
        self.save_state()

    def checkpoint_path(self, step: int) -> Path:
        return self.checkpoint_dir / f"ckpt_{step}.h5"

    def record_checkpoint(self, path: Path, step: int) -> None:
        self.state.latest_checkpoint = str(Path(path).relative_to(self.run_dir))
        self.state.step = step
        self.save_state()

    def latest_checkpoint(self) -> Optional[Path]:
        if self.state.latest_checkpoint is None:
            return None
        path = self.run_dir / self.state.latest_checkpoint
        return path if path.exists() else None

    def _append_csv(self, path: Path, rows: Sequence[Dict[str, Any]], columns: Sequence[str]) -> None:
        if not rows:
            return
        frame = pd.DataFrame(list(rows), columns=list(columns))
        frame.to_csv(path, mode="a", header=not path.exists(), index=False)

    def append_train_log(self, rows: Sequence[Dict[str, Any]], columns: Sequence[str]) -> None:
        self._append_csv(self.train_log, rows, columns)

    def truncate_train_log(self, step: int) -> None:
        """Drop log rows written after `step` (work lost since the last checkpoint)"""
        if not self.train_log.exists():
            return
        frame = pd.read_csv(self.train_log)
        frame[frame["step"] <= step].to_csv(self.train_log, index=False)

    def append_metrics(self, rows: Sequence[Dict[str, Any]], columns: Sequence[str]) -> None:
        self._append_csv(self.metrics_file, rows, columns)

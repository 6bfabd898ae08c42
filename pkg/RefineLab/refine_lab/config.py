#!/usr/bin/env python3
# config.py

import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Sequence, Tuple

from omegaconf import OmegaConf
from omegaconf.errors import OmegaConfBaseException
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .errors import ConfigError
from .tasks import CountdownCodec, TaskKind, Vocabulary, countdown_seq_len, sudoku_vocabulary

logger = logging.getLogger(__name__)


class _Block(BaseModel):
    model_config = ConfigDict(extra="forbid")


class TaskConfig(_Block):
    kind: TaskKind = TaskKind.SUDOKU
    # Sudoku
    n: int = 4
    clue_range: Tuple[int, int] = (4, 10)
    # Countdown
    k: int = 3
    operand_max: int = 99
    target_range: Tuple[int, int] = (10, 99)
    result_max: int = 999
    seq_len: Optional[int] = None

    @model_validator(mode="after")
    def _check(self):
        if self.kind == TaskKind.SUDOKU:
            b = int(round(self.n ** 0.5))
            if b * b != self.n:
                raise ValueError(f"task.n must be a perfect square, got {self.n}")
            lo, hi = self.clue_range
            if not 0 <= lo <= hi <= self.n * self.n:
                raise ValueError(f"task.clue_range {self.clue_range} infeasible for n={self.n}")
        else:
            if self.k < 2:
                raise ValueError("task.k must be at least 2")
            if self.seq_len is not None and self.seq_len < countdown_seq_len(self.k):
                raise ValueError(f"task.seq_len must be >= {countdown_seq_len(self.k)}")
            lo, hi = self.target_range
            if not 0 <= lo <= hi <= self.result_max or self.operand_max > self.result_max:
                raise ValueError("task ranges exceed task.result_max")
        return self

    @property
    def d(self) -> int:
        if self.kind == TaskKind.SUDOKU:
            return self.n * self.n
        return self.seq_len or countdown_seq_len(self.k)

    def codec(self) -> CountdownCodec:
        return CountdownCodec(self.result_max)

    def vocabulary(self) -> Vocabulary:
        if self.kind == TaskKind.SUDOKU:
            return sudoku_vocabulary(self.n)
        return self.codec().vocabulary()


class ModelConfig(_Block):
    hidden_dim: int = 128
    n_blocks: int = 4
    n_heads: int = 4
    dropout: float = 0.05
    ffn_ratio: int = 4
    head_hidden_dim: int = 128
    head_layers: int = 3
    # Follows train.mode when left unset
    variant: Optional[Literal["baseline", "adaptive"]] = None
    # Filled from the task block when left unset
    vocab_size: Optional[int] = None
    seq_len: Optional[int] = None

    @model_validator(mode="after")
    def _check(self):
        if self.hidden_dim % self.n_heads:
            raise ValueError("model.hidden_dim must be divisible by model.n_heads")
        if (self.hidden_dim // self.n_heads) % 2:
            raise ValueError("rotary embeddings need an even head dimension")
        if self.head_layers < 2:
            raise ValueError("model.head_layers must be at least 2")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("model.dropout must lie in [0, 1)")
        return self

    @classmethod
    def full_scale(cls, **overrides) -> "ModelConfig":
        """Full-size backbone (512 hidden, 8 blocks, 8 heads, 256x3 heads)"""
        values = dict(hidden_dim=512, n_blocks=8, n_heads=8, dropout=0.05, ffn_ratio=4,
                      head_hidden_dim=256, head_layers=3)
        values.update(overrides)
        return cls(**values)

    def resolved(self, task: TaskConfig) -> "ModelConfig":
        """Copy with vocab_size and seq_len taken from the task"""
        vocab = task.vocabulary()
        vocab_size = self.vocab_size if self.vocab_size is not None else vocab.size
        seq_len = self.seq_len if self.seq_len is not None else task.d
        if vocab_size != vocab.size or seq_len != task.d:
            raise ConfigError(
                f"model (vocab {vocab_size}, d {seq_len}) does not match task (vocab {vocab.size}, d {task.d})"
            )
        return self.model_copy(update={"vocab_size": vocab_size, "seq_len": seq_len})


class OptimConfig(_Block):
    lr: float = 3e-4
    weight_decay: float = 1e-4
    betas: Tuple[float, float] = (0.9, 0.999)
    warmup_steps: int = 1000
    clip_norm: float = 1.0

    @model_validator(mode="after")
    def _check(self):
        if self.lr <= 0 or self.weight_decay < 0 or self.clip_norm <= 0 or self.warmup_steps < 0:
            raise ValueError("optim values out of range")
        return self


class ScheduleConfig(_Block):
    kind: Literal["linear", "polynomial"] = "polynomial"
    exponent: float = 2.0
    gidd_pu_max: float = 0.2

    @model_validator(mode="after")
    def _check(self):
        if self.exponent <= 0:
            raise ValueError("schedule.exponent must be positive")
        if not 0.0 <= self.gidd_pu_max <= 1.0:
            raise ValueError("schedule.gidd_pu_max must lie in [0, 1]")
        return self


class LossConfig(_Block):
    epsilon: float = 0.05
    exponent: float = 1.0
    tau_loss: Literal["absolute", "squared"] = "absolute"
    confidence_clamp: float = 1e-4
    weights: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    on_policy: Literal["one_step", "rollout"] = "one_step"

    @model_validator(mode="after")
    def _check(self):
        if not 0.0 < self.confidence_clamp <= 0.1:
            raise ValueError("loss.confidence_clamp must lie in (0, 0.1]")
        if not 0.0 < self.epsilon < 1.0:
            raise ValueError("loss.epsilon must lie in (0, 1)")
        if any(w < 0 for w in self.weights):
            raise ValueError("loss.weights must be nonnegative")
        return self


class KernelConfig(_Block):
    epsilon: float = 0.05
    max_steps: int = 256
    rollout_len: int = 5
    rollout_prob: float = 0.1

    @model_validator(mode="after")
    def _check(self):
        if not 0.0 < self.epsilon < 1.0:
            raise ValueError("kernel.epsilon must lie in (0, 1)")
        if self.max_steps < 1 or self.rollout_len < 1:
            raise ValueError("kernel.max_steps and kernel.rollout_len must be >= 1")
        if not 0.0 <= self.rollout_prob <= 1.0:
            raise ValueError("kernel.rollout_prob must lie in [0, 1]")
        return self


METHODS = ("adaptive", "ensemble", "euler", "topk", "topk_margin", "remdm", "gidd-euler")


class InferenceConfig(_Block):
    methods: List[str] = Field(default_factory=lambda: ["adaptive"])
    K: List[int] = Field(default_factory=lambda: [1])
    n_steps: int = 100
    eta: float = 0.9
    t_end_eps: float = 1e-3

    @model_validator(mode="after")
    def _check(self):
        unknown = [m for m in self.methods if m not in METHODS]
        if unknown:
            raise ValueError(f"unknown inference methods {unknown}; choose from {METHODS}")
        if any(k < 1 for k in self.K) or self.n_steps < 1:
            raise ValueError("inference.K entries and inference.n_steps must be >= 1")
        if not 0.0 <= self.eta <= 1.0:
            raise ValueError("inference.eta must lie in [0, 1]")
        return self


class TrainConfig(_Block):
    mode: Literal["baseline", "adaptive", "gidd"] = "adaptive"
    steps: int = 1000
    batch_size: int = 64
    log_every: int = 50
    checkpoint_every: int = 500
    eval_every: int = 0
    eval_instances: int = 100


class PathsConfig(_Block):
    train_dataset: str = "data/train.txt"
    val_dataset: Optional[str] = None


class LoggingConfig(_Block):
    level: str = "INFO"


class RunConfig(_Block):
    seed: int = 0
    dtype: Literal["float32", "float64"] = "float32"
    task: TaskConfig = Field(default_factory=TaskConfig)
    model: ModelConfig = Field(default_factory=ModelConfig)
    optim: OptimConfig = Field(default_factory=OptimConfig)
    loss: LossConfig = Field(default_factory=LossConfig)
    schedule: ScheduleConfig = Field(default_factory=ScheduleConfig)
    kernel: KernelConfig = Field(default_factory=KernelConfig)
    inference: InferenceConfig = Field(default_factory=InferenceConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    paths: PathsConfig = Field(default_factory=PathsConfig)
    logging: LoggingConfig = Field(default_factory=LoggingConfig)

    @model_validator(mode="after")
    def _check_variant(self):
        expected = "adaptive" if self.train.mode == "adaptive" else "baseline"
        if self.model.variant is None:
            self.model = self.model.model_copy(update={"variant": expected})
        elif self.model.variant != expected:
            raise ValueError(f"train.mode={self.train.mode} needs model.variant={expected}")
        return self

    def to_json(self) -> str:
        return json.dumps(self.model_dump(mode="json"), indent=4, sort_keys=True)


# Task presets carry their schedule, on-policy mode and optimizer defaults
_SUDOKU_OPTIM = {"lr": 3e-4, "weight_decay": 1e-4, "warmup_steps": 1000, "clip_norm": 1.0}
_COUNTDOWN_OPTIM = {"lr": 5e-4, "weight_decay": 0.02, "warmup_steps": 1000, "clip_norm": 1.0}

TASK_PRESETS: Dict[str, Dict[str, Any]] = {
    "mini-sudoku": {
        "task": {"kind": "sudoku", "n": 4, "clue_range": [4, 10]},
        "schedule": {"kind": "polynomial", "exponent": 2.0},
        "loss": {"on_policy": "one_step"},
        "optim": _SUDOKU_OPTIM,
    },
    "sudoku": {
        "task": {"kind": "sudoku", "n": 9, "clue_range": [17, 25]},
        "schedule": {"kind": "polynomial", "exponent": 2.0},
        "loss": {"on_policy": "one_step"},
        "optim": _SUDOKU_OPTIM,
    },
    "countdown3": {
        "task": {"kind": "countdown", "k": 3, "operand_max": 99, "target_range": [10, 99]},
        "schedule": {"kind": "linear", "exponent": 1.0},
        "loss": {"on_policy": "rollout"},
        "optim": _COUNTDOWN_OPTIM,
    },
    "countdown4": {
        "task": {"kind": "countdown", "k": 4, "operand_max": 99, "target_range": [10, 99]},
        "schedule": {"kind": "linear", "exponent": 1.0},
        "loss": {"on_policy": "rollout"},
        "optim": _COUNTDOWN_OPTIM,
    },
}


def preset_config(name: str) -> Dict[str, Any]:
    """Nested override dict for a named task preset"""
    if name not in TASK_PRESETS:
        raise ConfigError(f"Unknown task preset {name!r}; choose from {sorted(TASK_PRESETS)}")
    return json.loads(json.dumps(TASK_PRESETS[name]))


def load_config(config_path: Optional[Path] = None, overrides: Sequence[str] = (),
                preset: Optional[str] = None) -> RunConfig:
    """
    Build a validated RunConfig.

    Layers, later wins: defaults, task preset, JSON config file, dotted overrides.

    Args:
        config_path: Nested JSON file (optional)
        overrides: Dotted `key=value` strings, e.g. ``train.steps=200``
        preset: Name from TASK_PRESETS
    """
    defaults = RunConfig().model_dump(mode="json")
    defaults["model"]["variant"] = None
    layers = [OmegaConf.create(defaults)]
    if preset:
        layers.append(OmegaConf.create(preset_config(preset)))
    if config_path is not None:
        config_path = Path(config_path)
        if not config_path.exists():
            raise FileNotFoundError(f"Config file not found: {config_path}")
        try:
            with open(config_path) as f:
                layers.append(OmegaConf.create(json.load(f)))
        except json.JSONDecodeError as e:
            raise ConfigError(f"Invalid JSON format in config file {config_path}: {e}") from e
    try:
        if overrides:
            layers.append(OmegaConf.from_dotlist(list(overrides)))
        merged = OmegaConf.to_container(OmegaConf.merge(*layers), resolve=True)
    except OmegaConfBaseException as e:
        raise ConfigError(f"Could not merge configuration: {e}") from e

    return RunConfig.model_validate(merged)


def with_overrides(config: RunConfig, overrides: Sequence[str]) -> RunConfig:
    """Apply dotted `key=value` overrides to an already validated config"""
    if not overrides:
        return config
    try:
        merged = OmegaConf.merge(OmegaConf.create(config.model_dump(mode="json")),
                                 OmegaConf.from_dotlist(list(overrides)))
    except OmegaConfBaseException as e:
        raise ConfigError(f"Could not merge configuration: {e}") from e
    return RunConfig.model_validate(OmegaConf.to_container(merged, resolve=True))

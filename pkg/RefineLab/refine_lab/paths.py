#!/usr/bin/env python3
# paths.py

import logging
from dataclasses import dataclass
from typing import Optional, Tuple, Union

import torch

from .config import ScheduleConfig
from .errors import InputError

logger = logging.getLogger(__name__)

Time = Union[float, torch.Tensor]


@dataclass(frozen=True)
class Schedule:
    """kappa_t = t ** exponent; linear is exponent 1"""
    kind: str = "polynomial"
    exponent: float = 2.0

    def __post_init__(self):
        if self.kind not in ("linear", "polynomial"):
            raise InputError(f"Unknown schedule kind {self.kind!r}")
        if self.exponent <= 0:
            raise InputError(f"Schedule exponent must be positive, got {self.exponent}")

    @classmethod
    def from_config(cls, cfg: ScheduleConfig) -> "Schedule":
        return cls(kind=cfg.kind, exponent=cfg.exponent)

    @property
    def power(self) -> float:
        return 1.0 if self.kind == "linear" else float(self.exponent)

    def value(self, t: Time) -> Time:
        return t ** self.power

    def derivative(self, t: Time) -> Time:
        if self.power == 1.0:
            return torch.ones_like(t) if isinstance(t, torch.Tensor) else 1.0
        return self.power * t ** (self.power - 1.0)


def _check_time(t: Time) -> None:
    if isinstance(t, torch.Tensor):
        if torch.any((t < 0) | (t > 1)) or torch.any(torch.isnan(t)):
            raise InputError("t must lie in [0, 1]")
    elif not 0.0 <= t <= 1.0:
        raise InputError(f"t must lie in [0, 1], got {t}")


def kappa(schedule: Schedule, t: Time) -> Tuple[Time, Time]:
    """Schedule value and derivative at t"""
    _check_time(t)
    return schedule.value(t), schedule.derivative(t)


@dataclass(frozen=True)
class GiddSchedule:
    """
    Source/uniform/target weights of the generalized path.

    The target weight follows the base schedule, the uniform weight is a bump
    p_u_max * 4t(1-t) scaled by the remaining mass, the source weight takes
    what is left. All three are nonnegative and sum to one.
    """
    schedule: Schedule
    pu_max: float = 0.2

    @classmethod
    def from_config(cls, cfg: ScheduleConfig) -> "GiddSchedule":
        return cls(schedule=Schedule.from_config(cfg), pu_max=cfg.gidd_pu_max)

    def weights(self, t: Time) -> Tuple[Time, Time, Time]:
        _check_time(t)
        k3 = self.schedule.value(t)
        k2 = self.pu_max * 4.0 * t * (1.0 - t) * (1.0 - k3)
        k1 = 1.0 - k3 - k2
        return k1, k2, k3


def _time_column(t: Time, like: torch.Tensor, dtype: Optional[torch.dtype] = None) -> torch.Tensor:
    """Broadcast a scalar or per-row time to shape (B, 1)"""
    dtype = dtype or torch.get_default_dtype()
    t = torch.as_tensor(t, dtype=dtype, device=like.device)
    _check_time(t)
    if t.dim() == 0:
        t = t.expand(like.shape[0])
    return t.reshape(-1, 1)


def sample_masking_path(x0: torch.Tensor, x1: torch.Tensor, clues: torch.Tensor, t: Time,
                        schedule: Schedule, generator: Optional[torch.Generator] = None) -> torch.Tensor:
    """Each non-clue position reveals x1 with probability kappa_t, otherwise keeps the mask"""
    k = schedule.value(_time_column(t, x1))
    u = torch.rand(x1.shape, generator=generator, device=x1.device, dtype=k.dtype)
    reveal = (u < k) & ~clues
    return torch.where(reveal, x1, x0)


def sample_gidd_path(x0: torch.Tensor, x1: torch.Tensor, clues: torch.Tensor, t: Time,
                     gidd: GiddSchedule, vocab_size: int,
                     generator: Optional[torch.Generator] = None) -> torch.Tensor:
    """Per non-clue position: x0 w.p. k1, uniform token w.p. k2, x1 w.p. k3"""
    k1, k2, k3 = gidd.weights(_time_column(t, x1))
    u = torch.rand(x1.shape, generator=generator, device=x1.device, dtype=k3.dtype)
    noise = torch.randint(0, vocab_size, x1.shape, generator=generator, device=x1.device)
    out = torch.where(u < k3 + k2, noise, x0)
    out = torch.where(u < k3, x1, out)
    return torch.where(clues, x0, out)


def path_marginals(x0: torch.Tensor, x1: torch.Tensor, clues: torch.Tensor,
                   weights: Tuple[Time, Time, Time], vocab_size: int) -> torch.Tensor:
    """
    Exact per-position law of a (generalized) conditional path.

    Returns (B, d, vocab_size + 1) probabilities, the last column being the
    mask. The masking path is weights (1 - kappa, 0, kappa).
    """
    k1, k2, k3 = (torch.as_tensor(w, dtype=torch.get_default_dtype()).reshape(-1, 1, 1) for w in weights)
    total = vocab_size + 1
    src = torch.nn.functional.one_hot(x0, total).to(k1.dtype)
    tgt = torch.nn.functional.one_hot(x1, total).to(k1.dtype)
    uniform = torch.zeros(total, dtype=k1.dtype)
    uniform[:vocab_size] = 1.0 / vocab_size
    law = k1 * src + k2 * uniform + k3 * tgt
    return torch.where(clues.unsqueeze(-1), src, law)


def tau_true(x: torch.Tensor, x1: torch.Tensor, clues: torch.Tensor) -> torch.Tensor:
    """Fraction of non-clue positions holding the solution token (mask counts as wrong)"""
    non_clue = ~clues
    count = non_clue.sum(-1)
    if torch.any(count == 0):
        raise InputError("tau_true needs at least one non-clue position")
    correct = ((x == x1) & non_clue).sum(-1)
    return correct.to(torch.get_default_dtype()) / count.to(torch.get_default_dtype())


def off_path(z: torch.Tensor, x1: torch.Tensor, clues: torch.Tensor, mask_id: int) -> torch.Tensor:
    """Rows containing a non-clue token that is neither mask nor the solution"""
    wrong = (z != mask_id) & (z != x1) & ~clues
    return wrong.any(-1)

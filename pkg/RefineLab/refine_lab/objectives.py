#!/usr/bin/env python3
# objectives.py

import logging
from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import torch
import torch.nn.functional as F

from .config import LossConfig
from .errors import NumericalError
from .model import ModelOutput
from .paths import tau_true

logger = logging.getLogger(__name__)


@dataclass
class LossBreakdown:
    total: torch.Tensor
    term1: torch.Tensor
    term2: torch.Tensor
    term3: torch.Tensor

    def as_floats(self) -> Dict[str, float]:
        return {name: float(getattr(self, name)) for name in ("total", "term1", "term2", "term3")}


def _check_finite(values: torch.Tensor, term: str) -> None:
    bad = ~torch.isfinite(values)
    if bad.any():
        where = bad.nonzero()[0].tolist()
        raise NumericalError(f"{term} is non-finite at index {tuple(where)}")


def _solution_log_probs(out: ModelOutput, x1: torch.Tensor) -> torch.Tensor:
    return F.log_softmax(out.logits, dim=-1).gather(-1, x1.unsqueeze(-1)).squeeze(-1)


def _sum_free(per_position: torch.Tensor, clues: torch.Tensor) -> torch.Tensor:
    """Per-sample sum over non-clue positions, averaged over the batch"""
    return torch.where(clues, torch.zeros_like(per_position), per_position).sum(-1).mean()


def commit_term(out: ModelOutput, x1: torch.Tensor, clues: torch.Tensor, cfg: LossConfig) -> torch.Tensor:
    """-log(c * p(x1)) over non-clue positions"""
    c = out.confidence.clamp_min(cfg.confidence_clamp)
    per_position = -(torch.log(c) + _solution_log_probs(out, x1))
    _check_finite(torch.where(clues, torch.zeros_like(per_position), per_position), "term1")
    return _sum_free(per_position, clues)


def mixing_weight(out: ModelOutput, cfg: LossConfig) -> torch.Tensor:
    """Gradient-stopped (1 / max(1 - c, eps)) ** k"""
    c = out.confidence.detach().clamp(cfg.confidence_clamp, 1.0 - cfg.confidence_clamp)
    return (1.0 / (1.0 - c).clamp_min(cfg.epsilon)) ** cfg.exponent


def mixing_term(out: ModelOutput, x1: torch.Tensor, clues: torch.Tensor, cfg: LossConfig,
                weight: Optional[torch.Tensor] = None) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    -w log(1 - c q) with q the denoiser mass off the solution token.

    Returns the term and the weight used, so a caller can hold the weight fixed.
    """
    c = out.confidence.clamp(cfg.confidence_clamp, 1.0 - cfg.confidence_clamp)
    q = (1.0 - _solution_log_probs(out, x1).exp()).clamp_min(0.0)
    w = mixing_weight(out, cfg) if weight is None else weight
    per_position = -w * torch.log1p(-c * q)
    _check_finite(torch.where(clues, torch.zeros_like(per_position), per_position), "term2")
    return _sum_free(per_position, clues), w


def progress_term(out: ModelOutput, z: torch.Tensor, x1: torch.Tensor, clues: torch.Tensor,
                  cfg: LossConfig) -> torch.Tensor:
    diff = tau_true(z, x1, clues).to(out.tau.dtype) - out.tau
    per_sample = diff.abs() if cfg.tau_loss == "absolute" else diff ** 2
    _check_finite(per_sample, "term3")
    return per_sample.mean()


def adaptive_loss(out: ModelOutput, x1: torch.Tensor, clues: torch.Tensor, z: torch.Tensor,
                  cfg: LossConfig) -> LossBreakdown:
    """Weighted commit, mixing and progress terms on training states z"""
    term1 = commit_term(out, x1, clues, cfg)
    term2, _ = mixing_term(out, x1, clues, cfg)
    term3 = progress_term(out, z, x1, clues, cfg)
    w1, w2, w3 = cfg.weights
    total = w1 * term1 + w2 * term2 + w3 * term3
    return LossBreakdown(total=total, term1=term1, term2=term2, term3=term3)


def _masked_ce(out: ModelOutput, x1: torch.Tensor, clues: torch.Tensor) -> torch.Tensor:
    per_position = -_solution_log_probs(out, x1)
    _check_finite(torch.where(clues, torch.zeros_like(per_position), per_position), "cross-entropy")
    return _sum_free(per_position, clues)


def baseline_ce_loss(out: ModelOutput, x1: torch.Tensor, clues: torch.Tensor) -> torch.Tensor:
    """Cross-entropy of the solution on masking-path states, no time weighting"""
    return _masked_ce(out, x1, clues)


def gidd_ce_loss(out: ModelOutput, x1: torch.Tensor, clues: torch.Tensor) -> torch.Tensor:
    """Same solution cross-entropy evaluated on generalized-path states"""
    return _masked_ce(out, x1, clues)


def ce_breakdown(loss: torch.Tensor) -> LossBreakdown:
    zero = torch.zeros((), dtype=loss.dtype)
    return LossBreakdown(total=loss, term1=loss, term2=zero, term3=zero)

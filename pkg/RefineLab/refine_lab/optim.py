#!/usr/bin/env python3
# optim.py

import logging
from typing import Any, Dict, List, Tuple

import torch
import torch.nn as nn
from torch.optim.lr_scheduler import LambdaLR

from .config import OptimConfig
from .errors import NumericalError

logger = logging.getLogger(__name__)


class LinearWarmup:
    """lr multiplier min(step / warmup, 1), step counting updates from 1"""

    def __init__(self, warmup_steps: int):
        self.warmup_steps = warmup_steps

    def __call__(self, completed: int) -> float:
        if self.warmup_steps <= 0:
            return 1.0
        return min((completed + 1) / self.warmup_steps, 1.0)


def param_groups(model: nn.Module, weight_decay: float) -> List[Dict[str, Any]]:
    """Matrices and embeddings decay; biases, norms and vectors do not"""
    decay, no_decay = [], []
    for _, p in model.named_parameters():
        if not p.requires_grad:
            continue
        (decay if p.dim() >= 2 else no_decay).append(p)
    return [
        {"params": decay, "weight_decay": weight_decay},
        {"params": no_decay, "weight_decay": 0.0},
    ]


class RefineOptimizer:
    def __init__(self, model: nn.Module, cfg: OptimConfig):
        """
        AdamW with decoupled weight decay, linear warmup and global-norm clipping

        Args:
            model: Module whose parameters are optimized
            cfg: Optimizer block
        """
        self.model = model
        self.cfg = cfg
        self.optimizer = torch.optim.AdamW(param_groups(model, cfg.weight_decay), lr=cfg.lr,
                                           betas=tuple(cfg.betas))
        self.scheduler = LambdaLR(self.optimizer, LinearWarmup(cfg.warmup_steps))

    @property
    def lr(self) -> float:
        return self.optimizer.param_groups[0]["lr"]

    def zero_grad(self) -> None:
        self.optimizer.zero_grad(set_to_none=True)

    def step(self) -> Tuple[float, float]:
        """Clip, update and advance warmup; returns (pre-clip grad norm, lr used)"""
        params = [p for p in self.model.parameters() if p.grad is not None]
        grad_norm = torch.nn.utils.clip_grad_norm_(params, self.cfg.clip_norm)
        if not torch.isfinite(grad_norm):
            raise NumericalError(f"Non-finite gradient norm {float(grad_norm)}")

        lr = self.lr
        self.optimizer.step()
        self.scheduler.step()

        for name, p in self.model.named_parameters():
            if not torch.all(torch.isfinite(p)):
                raise NumericalError(f"Parameter {name} became non-finite after the update")
        return float(grad_norm), lr

    def state_dict(self) -> Dict[str, Any]:
        return {"optimizer": self.optimizer.state_dict(), "scheduler": self.scheduler.state_dict()}

    def load_state_dict(self, state: Dict[str, Any]) -> None:
        self.optimizer.load_state_dict(state["optimizer"])
        self.scheduler.load_state_dict(state["scheduler"])

#!/usr/bin/env python3
# kernel.py

import logging
from typing import List, Optional, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import KernelConfig
from .ctmc import MAX_DENSE_STATES, enumerate_states, state_index
from .errors import CapacityError, InputError
from .model import ModelOutput
from .paths import Schedule, Time, sample_masking_path

logger = logging.getLogger(__name__)


def kernel_step(out: ModelOutput, y: torch.Tensor, clues: torch.Tensor, cfg: KernelConfig,
                generator: Optional[torch.Generator] = None,
                allow_stop: bool = True) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    One transition of the learned chain.

    Rows whose progress estimate reaches 1 - epsilon stay where they are.
    Otherwise every non-clue position commits to a sample from the denoiser
    with probability c, and becomes the mask with probability 1 - c.
    Returns (next state, stopped flags).
    """
    if out.confidence is None or out.tau is None:
        raise InputError("kernel_step needs confidence and progress heads")
    B, d = y.shape
    num_tokens = out.logits.shape[-1]

    commit = torch.rand(y.shape, generator=generator, dtype=out.confidence.dtype,
                        device=y.device) < out.confidence
    sampled = torch.multinomial(out.probs().reshape(B * d, num_tokens), 1,
                                generator=generator).reshape(B, d)
    nxt = torch.where(commit, sampled, torch.full_like(y, num_tokens))
    nxt = torch.where(clues, y, nxt)

    if allow_stop:
        stopped = out.tau >= 1.0 - cfg.epsilon
    else:
        stopped = torch.zeros(B, dtype=torch.bool, device=y.device)
    nxt = torch.where(stopped.unsqueeze(1), y, nxt)
    return nxt, stopped


def position_laws(out: ModelOutput, y: torch.Tensor, clues: torch.Tensor) -> torch.Tensor:
    """Per-position next-token law (1 - c) delta_mask + c p, clues pinned; shape (B, d, N + 1)"""
    probs = out.probs()
    c = out.confidence.unsqueeze(-1)
    law = torch.cat([c * probs, 1.0 - c], dim=-1)
    pinned = F.one_hot(y, probs.shape[-1] + 1).to(law.dtype)
    return torch.where(clues.unsqueeze(-1), pinned, law)


def kernel_distribution(out: ModelOutput, y: torch.Tensor, clues: torch.Tensor,
                        cfg: KernelConfig) -> torch.Tensor:
    """Exact next-state PMF over the enumerated state space for a single state y (1, d)"""
    if y.dim() != 2 or y.shape[0] != 1:
        raise InputError("kernel_distribution works on a single state of shape (1, d)")
    num_tokens = out.logits.shape[-1] + 1
    d = y.shape[1]
    if num_tokens ** d > MAX_DENSE_STATES:
        raise CapacityError(f"State space of {num_tokens ** d} states exceeds {MAX_DENSE_STATES}")

    if float(out.tau[0]) >= 1.0 - cfg.epsilon:
        pmf = torch.zeros(num_tokens ** d, dtype=out.logits.dtype)
        pmf[state_index(y[0], num_tokens)] = 1.0
        return pmf

    laws = position_laws(out, y, clues)[0]
    pmf = laws[0]
    for i in range(1, d):
        pmf = torch.kron(pmf, laws[i])
    return pmf


@torch.no_grad()
def chain_marginals(model: nn.Module, y0: torch.Tensor, clues: torch.Tensor, cfg: KernelConfig,
                    n_steps: int) -> List[torch.Tensor]:
    """Exact chain marginals mu_0..mu_n started at y0 (1, d), tiny instances only"""
    num_tokens = model.vocab_size + 1
    states = enumerate_states(num_tokens, y0.shape[1])
    all_clues = clues.expand(states.shape[0], -1)
    out = model(states, all_clues, None)

    transition = torch.stack([
        kernel_distribution(out.select(torch.tensor([s])), states[s:s + 1], clues, cfg)
        for s in range(states.shape[0])
    ])
    mu = torch.zeros(states.shape[0], dtype=transition.dtype)
    mu[state_index(y0[0], num_tokens)] = 1.0
    marginals = [mu]
    for _ in range(n_steps):
        mu = mu @ transition
        marginals.append(mu)
    return marginals


def _frozen_forward(model: nn.Module, x: torch.Tensor, clues: torch.Tensor) -> ModelOutput:
    with torch.no_grad():
        return model(x, clues, None)


def on_policy_sample(model: nn.Module, x0: torch.Tensor, x1: torch.Tensor, clues: torch.Tensor,
                     t: Time, schedule: Schedule, cfg: KernelConfig,
                     generator: Optional[torch.Generator] = None) -> torch.Tensor:
    """Masking-path sample followed by one gradient-free kernel step (stopping suppressed)"""
    return rollout(model, x0, x1, clues, t, schedule, cfg, 1, generator)


def rollout(model: nn.Module, x0: torch.Tensor, x1: torch.Tensor, clues: torch.Tensor,
            t: Time, schedule: Schedule, cfg: KernelConfig, k: int,
            generator: Optional[torch.Generator] = None) -> torch.Tensor:
    """Masking-path sample followed by k gradient-free kernel steps; rows freeze once stopped"""
    if k < 1:
        raise InputError(f"rollout length must be >= 1, got {k}")
    x = sample_masking_path(x0, x1, clues, t, schedule, generator)

    was_training = model.training
    model.eval()
    try:
        active = torch.ones(x.shape[0], dtype=torch.bool, device=x.device)
        for step in range(k):
            out = _frozen_forward(model, x, clues)
            nxt, stopped = kernel_step(out, x, clues, cfg, generator, allow_stop=step > 0)
            x = torch.where((active & ~stopped).unsqueeze(1), nxt, x)
            active = active & ~stopped
            if not active.any():
                break
    finally:
        model.train(was_training)
    return x


def use_rollout(prob: float, generator: Optional[torch.Generator] = None) -> bool:
    """Batch-level coin for the rollout branch"""
    return bool(torch.rand((), generator=generator) < prob)

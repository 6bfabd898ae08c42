#!/usr/bin/env python3
# inference.py

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, List, Optional, Sequence, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import KernelConfig
from .ctmc import conditional_velocity, euler_step
from .errors import InputError
from .kernel import kernel_step
from .paths import Schedule

logger = logging.getLogger(__name__)

TRACE_COLUMNS = ["step", "position", "token", "confidence", "tau", "is_clue", "is_correct"]


class StoppedBy(str, Enum):
    TAU = "tau"
    MAX_STEPS = "max_steps"
    SCHEDULE_END = "schedule_end"


@dataclass
class SolveResult:
    final: torch.Tensor
    steps: int
    stopped_by: StoppedBy
    trace: Optional[List[Dict[str, Any]]] = field(default=None, repr=False)


def _check_batch(x0: torch.Tensor, clues: torch.Tensor) -> None:
    if x0.dim() != 2 or clues.shape != x0.shape:
        raise InputError(f"Expected (B, d) states and clues, got {tuple(x0.shape)} and {tuple(clues.shape)}")


@torch.no_grad()
def solve_adaptive(model: nn.Module, x0: torch.Tensor, clues: torch.Tensor, cfg: KernelConfig,
                   generator: Optional[torch.Generator] = None, trace: bool = False) -> List[SolveResult]:
    """
    Iterate the learned kernel from x0 until the progress head fires or max_steps.

    Only rows still running are evaluated; a step is one forward evaluation.
    """
    _check_batch(x0, clues)
    model.eval()
    B = x0.shape[0]
    x = x0.clone()
    steps = torch.zeros(B, dtype=torch.long)
    active = torch.ones(B, dtype=torch.bool)
    stopped_by = [StoppedBy.MAX_STEPS] * B
    traces: List[List[Dict[str, Any]]] = [[] for _ in range(B)]

    for n in range(cfg.max_steps):
        rows = active.nonzero().squeeze(1)
        if rows.numel() == 0:
            break
        y = x[rows]
        out = model(y, clues[rows], None)
        steps[rows] += 1
        nxt, stopped = kernel_step(out, y, clues[rows], cfg, generator)

        if trace:
            for j, r in enumerate(rows.tolist()):
                tau = float(out.tau[j])
                traces[r].extend(
                    {"step": n + 1, "position": pos, "token": int(y[j, pos]),
                     "confidence": float(out.confidence[j, pos]), "tau": tau}
                    for pos in range(y.shape[1])
                )

        x[rows] = nxt
        for r in rows[stopped].tolist():
            stopped_by[r] = StoppedBy.TAU
        active[rows[stopped]] = False

    return [
        SolveResult(final=x[b], steps=int(steps[b]), stopped_by=stopped_by[b],
                    trace=traces[b] if trace else None)
        for b in range(B)
    ]


def aggregate_votes(finals: torch.Tensor, num_categories: int) -> torch.Tensor:
    """Per-position plurality over chains (K, B, d); ties go to the lowest id"""
    votes = F.one_hot(finals, num_categories).sum(0)
    return votes.argmax(-1)


def solve_ensemble(models: Sequence[nn.Module], x0: torch.Tensor, clues: torch.Tensor, K: int,
                   cfg: KernelConfig, seed: int) -> List[SolveResult]:
    """K adaptive chains; chain k uses models[k % M] and seed + k"""
    if K < 1 or not models:
        raise InputError("solve_ensemble needs K >= 1 and at least one model")
    chains = []
    for k in range(K):
        generator = torch.Generator().manual_seed(seed + k)
        chains.append(solve_adaptive(models[k % len(models)], x0, clues, cfg, generator))

    num_categories = models[0].vocab_size + 1
    finals = torch.stack([torch.stack([r.final for r in chain]) for chain in chains])
    voted = aggregate_votes(finals, num_categories)
    results = []
    for b in range(x0.shape[0]):
        runs = [chain[b] for chain in chains]
        all_tau = all(r.stopped_by == StoppedBy.TAU for r in runs)
        results.append(SolveResult(
            final=torch.where(clues[b], x0[b], voted[b]),
            steps=sum(r.steps for r in runs),
            stopped_by=StoppedBy.TAU if all_tau else StoppedBy.MAX_STEPS,
        ))
    return results


def _schedule_end(x: torch.Tensor, n_steps: int) -> List[SolveResult]:
    return [SolveResult(final=x[b], steps=n_steps, stopped_by=StoppedBy.SCHEDULE_END) for b in range(x.shape[0])]


@torch.no_grad()
def solve_dfm_euler(model: nn.Module, x0: torch.Tensor, clues: torch.Tensor, schedule: Schedule,
                    n_steps: int = 100, generator: Optional[torch.Generator] = None,
                    t_end_eps: float = 1e-3) -> List[SolveResult]:
    """
    Euler sampling of the conditional velocity on a uniform grid over [0, 1 - eps].

    Unmasked positions use a point-mass posterior on their current token, so
    they never move. Masks left at the end are filled by the argmax of the
    last prediction.
    """
    _check_batch(x0, clues)
    if n_steps < 1:
        raise InputError("n_steps must be >= 1")
    model.eval()
    mask_id = model.vocab_size
    grid = torch.linspace(0.0, 1.0 - t_end_eps, n_steps + 1, dtype=torch.float64).tolist()
    x = x0.clone()
    out = None
    for t, s in zip(grid[:-1], grid[1:]):
        out = model(x, clues, t)
        posterior = F.pad(out.probs(), (0, 1))
        committed = (x != mask_id).unsqueeze(-1)
        posterior = torch.where(committed, F.one_hot(x, mask_id + 1).to(posterior.dtype), posterior)
        rates = conditional_velocity(posterior, x, t, schedule, clues)
        x = euler_step(x, rates, s - t, generator, clues)

    x = torch.where(x == mask_id, out.logits.argmax(-1), x)
    return _schedule_end(x, n_steps)


def topk_count(masked: int, alpha_t: float, alpha_s: float) -> float:
    """Unrounded number of positions to reveal between alpha_t and alpha_s"""
    return masked * (alpha_s - alpha_t) / (1.0 - alpha_t)


def topk_budget(masked: int, alpha_t: float, alpha_s: float) -> int:
    """Round half up, at least one while masks remain, everything at the end"""
    if masked <= 0:
        return 0
    if alpha_t >= 1.0 or alpha_s >= 1.0:
        return masked
    k = int(topk_count(masked, alpha_t, alpha_s) + 0.5)
    return min(masked, max(1, k))


def certainty(probs: torch.Tensor, variant: str = "topk") -> torch.Tensor:
    """Max probability, or the gap between the two largest probabilities"""
    if variant == "topk":
        return probs.max(-1).values
    if variant == "margin":
        top2 = probs.topk(2, dim=-1).values
        return top2[..., 0] - top2[..., 1]
    raise InputError(f"Unknown certainty variant {variant!r}")


@torch.no_grad()
def solve_topk(model: nn.Module, x0: torch.Tensor, clues: torch.Tensor, schedule: Schedule,
               n_steps: int, variant: str = "topk",
               generator: Optional[torch.Generator] = None) -> List[SolveResult]:
    """Reveal the most certain masked positions each step; never remask"""
    _check_batch(x0, clues)
    model.eval()
    mask_id = model.vocab_size
    grid = torch.linspace(0.0, 1.0, n_steps + 1, dtype=torch.float64).tolist()
    x = x0.clone()
    for t, s in zip(grid[:-1], grid[1:]):
        alpha_t, alpha_s = schedule.value(t), schedule.value(s)
        out = model(x, clues, t)
        probs = out.probs()
        masked = x == mask_id
        score = certainty(probs, variant).masked_fill(~masked, float("-inf"))
        order = torch.sort(score, dim=-1, descending=True, stable=True).indices
        sampled = torch.multinomial(probs.reshape(-1, probs.shape[-1]), 1,
                                    generator=generator).reshape(x.shape)
        for b in range(x.shape[0]):
            budget = topk_budget(int(masked[b].sum()), alpha_t, alpha_s)
            chosen = order[b, :budget]
            x[b, chosen] = sampled[b, chosen]
    return _schedule_end(x, n_steps)


def remdm_transition_probs(alpha_t: float, alpha_s: float, eta: float) -> Tuple[float, float]:
    """(remask probability for revealed tokens, reveal probability for masks)"""
    sigma_max = 1.0 if alpha_t <= 0.0 else min(1.0, (1.0 - alpha_s) / alpha_t)
    sigma = eta * sigma_max
    if alpha_t >= 1.0:
        return sigma, 1.0
    reveal = (alpha_s - (1.0 - sigma) * alpha_t) / (1.0 - alpha_t)
    return sigma, min(max(reveal, 0.0), 1.0)


@torch.no_grad()
def solve_remdm(model: nn.Module, x0: torch.Tensor, clues: torch.Tensor, schedule: Schedule,
                n_steps: int, eta: float = 0.9,
                generator: Optional[torch.Generator] = None) -> List[SolveResult]:
    """Masked-diffusion reverse loop where revealed tokens may return to the mask"""
    _check_batch(x0, clues)
    if not 0.0 <= eta <= 1.0:
        raise InputError(f"eta must lie in [0, 1], got {eta}")
    model.eval()
    mask_id = model.vocab_size
    grid = torch.linspace(0.0, 1.0, n_steps + 1, dtype=torch.float64).tolist()
    x = x0.clone()
    for t, s in zip(grid[:-1], grid[1:]):
        sigma, reveal = remdm_transition_probs(schedule.value(t), schedule.value(s), eta)
        out = model(x, clues, t)
        probs = out.probs()
        u = torch.rand(x.shape, generator=generator, dtype=torch.float64)
        sampled = torch.multinomial(probs.reshape(-1, probs.shape[-1]), 1,
                                    generator=generator).reshape(x.shape)
        masked = x == mask_id
        remask = ~masked & ~clues & (u < sigma)
        unmask = masked & (u < reveal)
        x = torch.where(unmask, sampled, x)
        x = torch.where(remask, torch.full_like(x, mask_id), x)
    return _schedule_end(x, n_steps)

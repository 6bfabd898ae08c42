#!/usr/bin/env python3
# ctmc.py

import itertools
import logging
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import torch
import torch.nn.functional as F

from .errors import CapacityError, InputError, NumericalError, SingularityError, StepSizeError
from .paths import Schedule, kappa

logger = logging.getLogger(__name__)

MAX_DENSE_STATES = 10_000
SINGULARITY_TOL = 1e-9
RATE_SUM_TOL = 1e-9
RATE_NEG_TOL = -1e-12

# (t, states (S, d)) -> per-position rates (S, d, V)
VelocitySource = Callable[[float, torch.Tensor], torch.Tensor]


@dataclass
class PositionRates:
    """Factorized rates u^i(., y): shape (..., d, V) for state y of shape (..., d)"""
    rates: torch.Tensor
    state: torch.Tensor


def conditional_velocity(posteriors: torch.Tensor, y: torch.Tensor, t: float, schedule: Schedule,
                         clues: Optional[torch.Tensor] = None) -> PositionRates:
    """
    u^i(x, y) = kappa'(t) / (1 - kappa(t)) * (p^i(x | y) - [x = y^i])

    posteriors cover every category including the mask (last column).
    """
    value, deriv = kappa(schedule, t)
    if value >= 1.0 - SINGULARITY_TOL:
        raise SingularityError(f"kappa({t}) = {value} is too close to 1; clamp t")
    if posteriors.shape[:-1] != y.shape:
        raise InputError(f"posteriors {tuple(posteriors.shape)} do not match state {tuple(y.shape)}")

    delta = F.one_hot(y, posteriors.shape[-1]).to(posteriors.dtype)
    rates = (deriv / (1.0 - value)) * (posteriors - delta)
    if clues is not None:
        rates = rates.masked_fill(clues.unsqueeze(-1), 0.0)
    return PositionRates(rates=rates, state=y)


def rate_condition_check(rates: PositionRates) -> bool:
    """Per-position rates sum to zero and are nonnegative off the diagonal"""
    r = rates.rates
    diag = F.one_hot(rates.state, r.shape[-1]).bool()
    sums_ok = bool(torch.all(r.sum(-1).abs() <= RATE_SUM_TOL))
    off_ok = bool(torch.all(torch.where(diag, torch.zeros_like(r), r) >= RATE_NEG_TOL))
    return sums_ok and off_ok


def euler_transition(y: torch.Tensor, rates: PositionRates, h: float) -> torch.Tensor:
    """One-step per-position distribution delta_y + h * u"""
    delta = F.one_hot(y, rates.rates.shape[-1]).to(rates.rates.dtype)
    return delta + h * rates.rates


def max_step_size(rates: PositionRates) -> float:
    """Largest h keeping every one-step distribution nonnegative"""
    diag = F.one_hot(rates.state, rates.rates.shape[-1]).bool()
    outflow = -torch.where(diag, rates.rates, torch.zeros_like(rates.rates)).sum(-1)
    peak = float(outflow.max()) if outflow.numel() else 0.0
    return float("inf") if peak <= 0 else 1.0 / peak


def euler_step(y: torch.Tensor, rates: PositionRates, h: float,
               generator: Optional[torch.Generator] = None,
               clues: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Sample every position independently from delta_y + h * u"""
    if h < 0:
        raise InputError(f"Step size must be nonnegative, got {h}")
    h_max = max_step_size(rates)
    if h > h_max:
        logger.warning(f"Euler step {h:.3g} exceeds the stable bound, clamping to {h_max:.3g}")
        h = h_max

    probs = euler_transition(y, rates, h)
    if not torch.all(torch.isfinite(probs)) or torch.any(probs < -1e-9) \
            or torch.any((probs.sum(-1) - 1.0).abs() > 1e-6):
        raise StepSizeError(f"Invalid one-step distribution at h={h:.3g}")

    flat = probs.clamp_min(0.0).reshape(-1, probs.shape[-1])
    new = torch.multinomial(flat, 1, generator=generator).reshape(y.shape)
    if clues is not None:
        new = torch.where(clues, y, new)
    return new


# ---------------------------------------------------------------------------
# Dense machinery for tiny state spaces
# ---------------------------------------------------------------------------

def enumerate_states(num_tokens: int, seq_len: int) -> torch.Tensor:
    """All states in lexicographic order, position 0 most significant"""
    size = num_tokens ** seq_len
    if size > MAX_DENSE_STATES:
        raise CapacityError(f"State space of {size} states exceeds {MAX_DENSE_STATES}")
    return torch.tensor(list(itertools.product(range(num_tokens), repeat=seq_len)), dtype=torch.long).reshape(size, seq_len)


def state_index(states: torch.Tensor, num_tokens: int) -> torch.Tensor:
    seq_len = states.shape[-1]
    weights = num_tokens ** torch.arange(seq_len - 1, -1, -1)
    return (states * weights).sum(-1)


def assemble_dense(rates: torch.Tensor, states: torch.Tensor, num_tokens: int) -> torch.Tensor:
    """
    Dense generator Q[x, y] = sum_i u^i(x^i, y) [x and y agree off position i].

    rates: (S, d, V) factorized rates evaluated at every enumerated state.
    """
    size, seq_len = states.shape
    weights = num_tokens ** torch.arange(seq_len - 1, -1, -1)
    y_idx = state_index(states, num_tokens)
    tokens = torch.arange(num_tokens)
    cols = y_idx.unsqueeze(1).expand(size, num_tokens).reshape(-1)

    Q = torch.zeros(size, size, dtype=rates.dtype)
    for i in range(seq_len):
        base = y_idx - states[:, i] * weights[i]
        x_idx = (base.unsqueeze(1) + tokens.unsqueeze(0) * weights[i]).reshape(-1)
        Q.index_put_((x_idx, cols), rates[:, i, :].reshape(-1), accumulate=True)
    return Q


def _check_pmf(p0: torch.Tensor, size: int) -> None:
    if p0.shape != (size,):
        raise InputError(f"Initial PMF must have {size} entries, got {tuple(p0.shape)}")
    if torch.any(p0 < 0) or abs(float(p0.sum()) - 1.0) > 1e-12:
        raise InputError("Initial PMF must be nonnegative and sum to 1")


def exact_evolve(p0: torch.Tensor, velocity: VelocitySource, t_grid: Sequence[float],
                 num_tokens: int, seq_len: int) -> torch.Tensor:
    """
    RK4 integration of the Kolmogorov equation dp/dt = Q_t p on the full state space.

    Returns the trajectory, shape (len(t_grid), S).
    """
    states = enumerate_states(num_tokens, seq_len)
    _check_pmf(p0, states.shape[0])

    def deriv(t: float, p: torch.Tensor) -> torch.Tensor:
        return assemble_dense(velocity(t, states), states, num_tokens) @ p

    p = p0.clone()
    trajectory = [p]
    for t_a, t_b in zip(t_grid[:-1], t_grid[1:]):
        h = t_b - t_a
        k1 = deriv(t_a, p)
        k2 = deriv(t_a + h / 2, p + h / 2 * k1)
        k3 = deriv(t_a + h / 2, p + h / 2 * k2)
        k4 = deriv(t_b, p + h * k3)
        p = p + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)

        drift = abs(float(p.sum()) - 1.0)
        if drift > 1e-10 or not torch.all(torch.isfinite(p)):
            raise NumericalError(f"Probability mass drifted by {drift:.3g} at t={t_b}")
        p = p / p.sum()
        trajectory.append(p)
    return torch.stack(trajectory)


def euler_evolve(p0: torch.Tensor, velocity: VelocitySource, t_grid: Sequence[float],
                 num_tokens: int, seq_len: int) -> torch.Tensor:
    """
    Exact law of the factorized Euler sampler on the full state space.

    Each step applies M[y, x] = prod_i (delta + h u^i)(x^i | y), the transition
    matrix of independent per-position draws.
    """
    states = enumerate_states(num_tokens, seq_len)
    _check_pmf(p0, states.shape[0])

    p = p0.clone()
    trajectory = [p]
    for t_a, t_b in zip(t_grid[:-1], t_grid[1:]):
        h = t_b - t_a
        probs = euler_transition(states, PositionRates(velocity(t_a, states), states), h)
        if torch.any(probs < -1e-12):
            raise StepSizeError(f"Negative transition probability at t={t_a}, h={h}")
        M = torch.ones(states.shape[0], states.shape[0], dtype=probs.dtype)
        for i in range(seq_len):
            M = M * probs[:, i, :][:, states[:, i]]
        p = M.T @ p
        trajectory.append(p)
    return torch.stack(trajectory)


def cross_entropy(p: torch.Tensor, q: torch.Tensor) -> torch.Tensor:
    """-sum_x p(x) log q(x) over the last axis"""
    support = p > 0
    if torch.any(support & (q <= 0)):
        raise NumericalError("Cross-entropy support violation: q(x) = 0 where p(x) > 0")
    log_q = torch.log(torch.where(support, q, torch.ones_like(q)))
    return -torch.where(support, p * log_q, torch.zeros_like(p)).sum(-1)

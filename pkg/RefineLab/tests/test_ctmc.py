import logging
import math

import pytest
import torch
import torch.nn.functional as F

from refine_lab.ctmc import (PositionRates, assemble_dense, conditional_velocity, cross_entropy, enumerate_states,
                             euler_evolve, euler_step, exact_evolve, rate_condition_check, state_index)
from refine_lab.errors import CapacityError, InputError, NumericalError, SingularityError, StepSizeError
from refine_lab.paths import Schedule

LINEAR = Schedule("linear", 1.0)
SQUARE = Schedule("polynomial", 2.0)

# Tiny product space: tokens {0, 1} plus the mask as token 2
NUM_TOKENS, MASK = 3, 2
X1 = torch.tensor([0, 1])


def masking_velocity(schedule, x1=X1, num_tokens=NUM_TOKENS):
    def velocity(t, states):
        posteriors = F.one_hot(x1.expand_as(states), num_tokens).to(torch.float64)
        return conditional_velocity(posteriors, states, t, schedule).rates
    return velocity


def analytic_path(states, k, x1=X1, mask=MASK):
    per_position = torch.where(states == x1, torch.full(states.shape, k, dtype=torch.float64),
                               torch.where(states == mask, torch.full(states.shape, 1.0 - k, dtype=torch.float64),
                                           torch.zeros(states.shape, dtype=torch.float64)))
    return per_position.prod(-1)


def start_pmf(num_tokens=NUM_TOKENS, seq_len=2, mask=MASK):
    states = enumerate_states(num_tokens, seq_len)
    p0 = torch.zeros(states.shape[0], dtype=torch.float64)
    p0[state_index(torch.full((seq_len,), mask), num_tokens)] = 1.0
    return states, p0


class TestVelocity:
    def test_single_position_rates(self, float64):
        posteriors = torch.tensor([[[1.0, 0.0]]])
        rates = conditional_velocity(posteriors, torch.tensor([[1]]), 0.5, LINEAR)
        assert torch.allclose(rates.rates, torch.tensor([[[2.0, -2.0]]]))

    def test_point_mass_on_current_token_is_fixed(self, float64):
        y = torch.tensor([[0, 2, 1]])
        rates = conditional_velocity(F.one_hot(y, 4).double(), y, 0.3, SQUARE)
        assert torch.all(rates.rates == 0)

    def test_rate_condition_on_random_posteriors(self, float64):
        gen = torch.Generator().manual_seed(0)
        posteriors = torch.softmax(torch.randn(1000, 3, 4, generator=gen), -1)
        y = torch.randint(0, 4, (1000, 3), generator=gen)
        for t in (0.0, 0.37, 0.9):
            assert rate_condition_check(conditional_velocity(posteriors, y, t, SQUARE))

    def test_rate_condition_rejects_bad_rates(self, float64):
        y = torch.tensor([[0]])
        assert not rate_condition_check(PositionRates(torch.tensor([[[-1.0, 1.1]]]), y))
        assert not rate_condition_check(PositionRates(torch.tensor([[[0.5, -0.5, 0.0]]]), torch.tensor([[2]])))

    def test_singularity(self, float64):
        with pytest.raises(SingularityError):
            conditional_velocity(torch.tensor([[[1.0, 0.0]]]), torch.tensor([[1]]), 1.0, LINEAR)

    def test_clue_rates_are_zero(self, float64):
        y = torch.tensor([[2, 2]])
        posteriors = torch.full((1, 2, 3), 1.0 / 3)
        rates = conditional_velocity(posteriors, y, 0.5, LINEAR, clues=torch.tensor([[True, False]]))
        assert torch.all(rates.rates[0, 0] == 0) and torch.any(rates.rates[0, 1] != 0)


class TestEulerStep:
    def setup_method(self):
        self.y = torch.ones(100_000, 1, dtype=torch.long)
        posteriors = torch.tensor([1.0, 0.0], dtype=torch.float64).expand(100_000, 1, 2)
        self.rates = conditional_velocity(posteriors, self.y, 0.5, LINEAR)

    def test_zero_step_keeps_state(self, generator):
        assert torch.equal(euler_step(self.y, self.rates, 0.0, generator), self.y)

    def test_move_probability(self, generator):
        moved = (euler_step(self.y, self.rates, 0.1, generator) == 0).double().mean().item()
        assert abs(moved - 0.2) < 4 * math.sqrt(0.2 * 0.8 / 100_000)

    def test_oversized_step_is_clamped(self, generator, caplog):
        with caplog.at_level(logging.WARNING, logger="refine_lab.ctmc"):
            new = euler_step(self.y, self.rates, 1.0, generator)
        assert torch.all(new == 0)
        assert "clamping" in caplog.text

    def test_invalid_distribution(self, generator):
        rates = conditional_velocity(torch.tensor([[[1.0, 1.0]]], dtype=torch.float64), torch.tensor([[1]]), 0.5, LINEAR)
        with pytest.raises(StepSizeError):
            euler_step(torch.tensor([[1]]), rates, 0.1, generator)

    def test_negative_step(self, generator):
        with pytest.raises(InputError):
            euler_step(self.y, self.rates, -0.1, generator)

    def test_clues_never_move(self, generator):
        y = torch.ones(1000, 2, dtype=torch.long)
        posteriors = torch.tensor([1.0, 0.0], dtype=torch.float64).expand(1000, 2, 2)
        clues = torch.tensor([True, False]).expand(1000, 2)
        rates = conditional_velocity(posteriors, y, 0.5, LINEAR)
        new = euler_step(y, rates, 0.4, generator, clues)
        assert torch.all(new[:, 0] == 1) and torch.any(new[:, 1] == 0)


class TestDenseEvolution:
    def test_enumeration(self):
        states = enumerate_states(3, 2)
        assert states.shape == (9, 2)
        assert torch.equal(state_index(states, 3), torch.arange(9))
        with pytest.raises(CapacityError):
            enumerate_states(11, 4)

    def test_dense_generator_columns_sum_to_zero(self, float64):
        states = enumerate_states(NUM_TOKENS, 2)
        Q = assemble_dense(masking_velocity(SQUARE)(0.4, states), states, NUM_TOKENS)
        assert torch.allclose(Q.sum(0), torch.zeros(9), atol=1e-12)

    def test_zero_velocity_is_stationary(self, float64):
        states, _ = start_pmf()
        p0 = torch.full((9,), 1.0 / 9)
        traj = exact_evolve(p0, lambda t, s: torch.zeros(s.shape[0], 2, NUM_TOKENS), [0.0, 0.25, 0.5], NUM_TOKENS, 2)
        assert torch.allclose(traj, p0.expand(3, 9), atol=1e-15)

    def test_single_position_masking_path(self, float64):
        x1 = torch.tensor([0])
        states, p0 = start_pmf(num_tokens=2, seq_len=1, mask=1)
        grid = torch.linspace(0.0, 0.95, 1000).tolist()
        traj = exact_evolve(p0, masking_velocity(LINEAR, x1, 2), grid, 2, 1)
        assert abs(traj[-1, 0].item() - 0.95) <= 1e-6

    @pytest.mark.parametrize("schedule", [LINEAR, SQUARE])
    def test_product_path(self, float64, schedule):
        states, p0 = start_pmf()
        grid = torch.linspace(0.0, 0.95, 1000).tolist()
        traj = exact_evolve(p0, masking_velocity(schedule), grid, NUM_TOKENS, 2)
        assert torch.all((traj.sum(-1) - 1.0).abs() <= 1e-10)
        for idx in (250, 600, 999):
            expected = analytic_path(states, schedule.value(grid[idx]))
            assert torch.max((traj[idx] - expected).abs()) <= 1e-6

    def test_bad_initial_pmf(self, float64):
        with pytest.raises(InputError):
            exact_evolve(torch.full((9,), 0.2), masking_velocity(LINEAR), [0.0, 0.1], NUM_TOKENS, 2)

    def test_euler_recursion_close_to_path(self, float64):
        states, p0 = start_pmf()
        grid = torch.linspace(0.0, 0.9, 901).tolist()
        traj = euler_evolve(p0, masking_velocity(SQUARE), grid, NUM_TOKENS, 2)
        errors = [(traj[i] - analytic_path(states, SQUARE.value(t))).abs().sum().item() for i, t in enumerate(grid)]
        assert max(errors) <= 2e-2

    def test_euler_is_first_order(self, float64):
        states, p0 = start_pmf()

        def final_error(n_steps):
            grid = torch.linspace(0.0, 0.5, n_steps + 1).tolist()
            traj = euler_evolve(p0, masking_velocity(SQUARE), grid, NUM_TOKENS, 2)
            return (traj[-1] - analytic_path(states, SQUARE.value(0.5))).abs().sum().item()

        coarse, fine = final_error(50), final_error(100)
        assert fine > 0
        assert coarse / fine >= 1.8


class TestCrossEntropy:
    def test_point_mass(self, float64):
        q = torch.tensor([0.2, 0.3, 0.5])
        assert math.isclose(cross_entropy(torch.tensor([0.0, 1.0, 0.0]), q).item(), -math.log(0.3))

    def test_self_is_entropy(self, float64):
        p = torch.tensor([0.1, 0.2, 0.7])
        assert math.isclose(cross_entropy(p, p).item(), -(p * p.log()).sum().item())

    def test_value(self, float64):
        value = cross_entropy(torch.tensor([0.5, 0.5]), torch.tensor([0.25, 0.75])).item()
        assert abs(value - 0.8369) < 1e-4

    def test_support_violation(self, float64):
        with pytest.raises(NumericalError):
            cross_entropy(torch.tensor([0.5, 0.5]), torch.tensor([1.0, 0.0]))

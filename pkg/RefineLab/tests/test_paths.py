import itertools

import numpy as np
import pytest
import torch

from refine_lab.errors import InputError
from refine_lab.paths import (GiddSchedule, Schedule, kappa, off_path, path_marginals, sample_gidd_path,
                              sample_masking_path, tau_true)

LINEAR = Schedule("linear", 1.0)
SQUARE = Schedule("polynomial", 2.0)


def free_batch(batch, d, clue_count=0, vocab=4):
    """x0/x1/clues with the first `clue_count` positions clued"""
    x1 = torch.arange(d).remainder(vocab).expand(batch, d).clone()
    clues = torch.zeros(batch, d, dtype=torch.bool)
    clues[:, :clue_count] = True
    x0 = torch.where(clues, x1, torch.full_like(x1, vocab))
    return x0, x1, clues


class TestKappa:
    def test_values(self):
        assert kappa(SQUARE, 0.5) == (0.25, 1.0)
        assert kappa(LINEAR, 0.0) == (0.0, 1.0)
        for schedule in (LINEAR, SQUARE, Schedule("polynomial", 3.0)):
            assert kappa(schedule, 1.0)[0] == 1.0

    def test_out_of_range(self):
        with pytest.raises(InputError):
            kappa(LINEAR, 1.5)
        with pytest.raises(InputError):
            kappa(LINEAR, torch.tensor([0.2, -0.1]))


class TestMaskingPath:
    def test_boundaries(self, generator):
        x0, x1, clues = free_batch(8, 16, clue_count=4)
        assert torch.equal(sample_masking_path(x0, x1, clues, 1.0, SQUARE, generator), x1)
        assert torch.equal(sample_masking_path(x0, x1, clues, 0.0, SQUARE, generator), x0)

    def test_tokens_stay_on_path(self, generator):
        x0, x1, clues = free_batch(500, 16, clue_count=4)
        z = sample_masking_path(x0, x1, clues, torch.rand(500, generator=generator), SQUARE, generator)
        assert torch.all((z == 4) | (z == x1))
        assert torch.equal(z[clues], x1[clues])
        assert not off_path(z, x1, clues, 4).any()

    def test_unmask_frequency(self, generator):
        n = 100_000
        x0, x1, clues = free_batch(n, 16, clue_count=4)
        z = sample_masking_path(x0, x1, clues, 0.5, LINEAR, generator)
        freq = (z[:, 4:] == x1[:, 4:]).double().mean(0)
        sigma = (0.25 / n) ** 0.5
        assert torch.all((freq - 0.5).abs() < 4 * sigma)


class TestProgress:
    def test_values(self):
        x0, x1, clues = free_batch(1, 16, clue_count=4)
        assert tau_true(x1, x1, clues).item() == 1.0
        assert tau_true(x0, x1, clues).item() == 0.0
        x = x0.clone()
        x[0, 4:7] = x1[0, 4:7]
        assert tau_true(x, x1, clues).item() == 0.25

    def test_needs_free_positions(self):
        x0, x1, clues = free_batch(1, 4, clue_count=4)
        with pytest.raises(InputError):
            tau_true(x0, x1, clues)

    @pytest.mark.parametrize("schedule", [LINEAR, SQUARE])
    def test_expected_progress_equals_schedule_exactly(self, float64, schedule):
        d = 6
        x0, x1, clues = free_batch(1, d)
        for t in np.linspace(0.0, 1.0, 21):
            k = schedule.value(float(t))
            expected = 0.0
            for revealed in itertools.product([False, True], repeat=d):
                mask = torch.tensor([revealed])
                x = torch.where(mask, x1, x0)
                prob = np.prod([k if r else 1.0 - k for r in revealed])
                expected += prob * tau_true(x, x1, clues).item()
            assert abs(expected - k) <= 1e-12

    def test_expected_progress_monte_carlo(self, float64, generator):
        n, t = 100_000, 0.6
        x0, x1, clues = free_batch(n, 16, clue_count=3)
        tau = tau_true(sample_masking_path(x0, x1, clues, t, SQUARE, generator), x1, clues)
        stderr = tau.std().item() / n ** 0.5
        assert abs(tau.mean().item() - SQUARE.value(t)) <= 3 * stderr


class TestGiddPath:
    def test_weights_sum_to_one(self, float64):
        gidd = GiddSchedule(SQUARE, pu_max=0.2)
        t = torch.linspace(0.0, 1.0, 1000)
        k1, k2, k3 = gidd.weights(t)
        assert torch.all(k1 >= 0) and torch.all(k2 >= 0) and torch.all(k3 >= 0)
        assert torch.max((k1 + k2 + k3 - 1.0).abs()) <= 1e-12
        assert gidd.weights(0.0) == (1.0, 0.0, 0.0)
        assert gidd.weights(1.0)[2] == 1.0

    def test_boundary_and_reduction(self, generator):
        x0, x1, clues = free_batch(16, 16, clue_count=4)
        gidd = GiddSchedule(SQUARE, pu_max=0.2)
        assert torch.equal(sample_gidd_path(x0, x1, clues, 1.0, gidd, 4, generator), x1)
        plain = GiddSchedule(SQUARE, pu_max=0.0)
        z = sample_gidd_path(x0, x1, clues, 0.5, plain, 4, generator)
        assert torch.all((z == 4) | (z == x1))

    def test_mixture_law(self, float64):
        x0 = torch.tensor([[4]])
        x1 = torch.tensor([[2]])
        clues = torch.tensor([[False]])
        law = path_marginals(x0, x1, clues, (0.5, 0.25, 0.25), 4)[0, 0]
        expected = torch.tensor([0.0625, 0.0625, 0.3125, 0.0625, 0.5])
        assert torch.allclose(law, expected, atol=1e-15)
        assert torch.allclose(path_marginals(x0, x1, torch.tensor([[True]]), (0.5, 0.25, 0.25), 4)[0, 0],
                              torch.tensor([0.0, 0.0, 0.0, 0.0, 1.0]))

    def test_sampler_matches_marginals(self, float64, generator):
        n, t = 100_000, 0.5
        gidd = GiddSchedule(LINEAR, pu_max=0.4)
        x0, x1, clues = free_batch(n, 1)
        z = sample_gidd_path(x0, x1, clues, t, gidd, 4, generator)
        empirical = torch.bincount(z.reshape(-1), minlength=5).double() / n
        exact = path_marginals(x0[:1], x1[:1], clues[:1], gidd.weights(t), 4)[0, 0]
        assert torch.all((empirical - exact).abs() < 4 * (exact * (1 - exact) / n).sqrt() + 1e-12)

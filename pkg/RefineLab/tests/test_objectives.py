import math

import pytest
import torch
import torch.nn.functional as F
from torch.nn.utils import parameters_to_vector, vector_to_parameters

from refine_lab.config import LossConfig
from refine_lab.errors import NumericalError
from refine_lab.model import LOGIT_CLIP, ModelOutput
from refine_lab.objectives import (adaptive_loss, baseline_ce_loss, ce_breakdown, commit_term, gidd_ce_loss,
                                   mixing_term, mixing_weight, progress_term)
from refine_lab.paths import Schedule, sample_masking_path, tau_true
from refine_lab.tasks import stack_instances

CFG = LossConfig()
B, D, N = 4, 6, 5


@pytest.fixture
def problem(float64):
    gen = torch.Generator().manual_seed(11)
    x1 = torch.randint(0, N, (B, D), generator=gen)
    clues = torch.zeros(B, D, dtype=torch.bool)
    clues[:, :2] = True
    z = torch.where(torch.rand(B, D, generator=gen) < 0.5, x1, torch.full_like(x1, N))
    z[clues] = x1[clues]
    out = ModelOutput(
        logits=torch.randn(B, D, N, generator=gen),
        confidence=0.1 + 0.8 * torch.rand(B, D, generator=gen),
        tau=0.05 + 0.9 * torch.rand(B, generator=gen),
    )
    return out, x1, clues, z


def perfect(x1, z, clues):
    return ModelOutput(
        logits=(2.0 * F.one_hot(x1, N).double() - 1.0) * LOGIT_CLIP,
        confidence=torch.ones(x1.shape, dtype=torch.float64),
        tau=tau_true(z, x1, clues).double(),
    )


class TestValues:
    def test_perfect_outputs_cost_nothing(self, problem):
        _, x1, clues, z = problem
        loss = adaptive_loss(perfect(x1, z, clues), x1, clues, z, CFG)
        assert loss.term1.item() == pytest.approx(0.0, abs=1e-12)
        assert loss.term2.item() == pytest.approx(0.0, abs=1e-12)
        assert loss.term3.item() == 0.0

    def test_zero_confidence_is_clamped(self, problem):
        _, x1, clues, z = problem
        out = perfect(x1, z, clues)
        out.confidence = torch.zeros(B, D)
        assert commit_term(out, x1, clues, CFG).item() == pytest.approx((D - 2) * -math.log(1e-4))

    def test_uniform_denoiser(self, problem):
        _, x1, clues, z = problem
        out = ModelOutput(logits=torch.zeros(B, D, N), confidence=torch.full((B, D), 0.5), tau=torch.zeros(B))
        expected1 = (D - 2) * (math.log(2.0) + math.log(N))
        assert commit_term(out, x1, clues, CFG).item() == pytest.approx(expected1)
        term2, w = mixing_term(out, x1, clues, CFG)
        assert torch.allclose(w, torch.full((B, D), 2.0))
        assert term2.item() == pytest.approx((D - 2) * -2.0 * math.log1p(-0.5 * (1 - 1 / N)))

    def test_decomposition(self, problem):
        out, x1, clues, z = problem
        cfg = LossConfig(weights=(0.5, 2.0, 3.0))
        loss = adaptive_loss(out, x1, clues, z, cfg)
        assert loss.total.item() == pytest.approx(0.5 * loss.term1.item() + 2.0 * loss.term2.item()
                                                  + 3.0 * loss.term3.item())
        assert set(loss.as_floats()) == {"total", "term1", "term2", "term3"}

    def test_clue_positions_do_not_count(self, problem):
        out, x1, clues, z = problem
        before = adaptive_loss(out, x1, clues, z, CFG).total
        logits = out.logits.clone()
        logits[clues] = 100.0 * torch.randn(int(clues.sum()), N)
        confidence = out.confidence.clone()
        confidence[clues] = 0.0
        after = adaptive_loss(ModelOutput(logits, confidence, out.tau), x1, clues, z, CFG).total
        assert after.item() == pytest.approx(before.item(), rel=1e-12)

    def test_progress_loss_forms(self, problem):
        out, x1, clues, z = problem
        diff = tau_true(z, x1, clues) - out.tau
        assert progress_term(out, z, x1, clues, CFG).item() == pytest.approx(diff.abs().mean().item())
        squared = LossConfig(tau_loss="squared")
        assert progress_term(out, z, x1, clues, squared).item() == pytest.approx(diff.square().mean().item())

    def test_weight_exponent_and_cap(self, float64):
        out = ModelOutput(logits=torch.zeros(1, 3, 2), confidence=torch.tensor([[0.5, 0.9, 0.999]]))
        assert mixing_weight(out, LossConfig(exponent=2.0)).tolist()[0] == pytest.approx([4.0, 100.0, 400.0])

    def test_non_finite_logits(self, problem):
        out, x1, clues, z = problem
        out.logits[1, 3, 0] = float("nan")
        with pytest.raises(NumericalError, match="term1"):
            adaptive_loss(out, x1, clues, z, CFG)


class TestBaselines:
    def test_commit_term_reduces_to_cross_entropy(self, problem):
        out, x1, clues, _ = problem
        full = ModelOutput(logits=out.logits, confidence=torch.ones(B, D))
        assert commit_term(full, x1, clues, CFG).item() == pytest.approx(baseline_ce_loss(out, x1, clues).item())

    def test_cross_entropy_value(self, problem):
        out, x1, clues, _ = problem
        per_position = F.cross_entropy(out.logits.reshape(-1, N), x1.reshape(-1), reduction="none").reshape(B, D)
        expected = per_position[:, 2:].sum(-1).mean().item()
        assert baseline_ce_loss(out, x1, clues).item() == pytest.approx(expected)
        assert gidd_ce_loss(out, x1, clues).item() == pytest.approx(expected)

    def test_breakdown(self):
        loss = torch.tensor(1.5)
        parts = ce_breakdown(loss).as_floats()
        assert parts == {"total": 1.5, "term1": 1.5, "term2": 0.0, "term3": 0.0}


class TestGradients:
    def test_finite_differences(self, problem):
        out, x1, clues, z = problem
        weight = mixing_weight(out, CFG)

        def loss(logits, confidence, tau):
            o = ModelOutput(logits, confidence, tau)
            return (commit_term(o, x1, clues, CFG) + mixing_term(o, x1, clues, CFG, weight)[0]
                    + progress_term(o, z, x1, clues, CFG))

        inputs = tuple(t.clone().requires_grad_() for t in (out.logits, out.confidence, out.tau))
        assert torch.autograd.gradcheck(loss, inputs, eps=1e-6, atol=1e-6)

    def test_weight_is_gradient_stopped(self, problem):
        out, x1, clues, _ = problem
        confidence = out.confidence.clone().requires_grad_()
        o = ModelOutput(out.logits, confidence, out.tau)
        term2, w = mixing_term(o, x1, clues, CFG)
        term2.backward()
        q = 1.0 - F.softmax(out.logits, -1).gather(-1, x1.unsqueeze(-1)).squeeze(-1)
        expected = torch.where(clues, torch.zeros_like(q), w * q / (1.0 - confidence.detach() * q)) / B
        assert torch.allclose(confidence.grad, expected, atol=1e-12)

    @pytest.mark.parametrize("term", ["commit", "mixing", "progress", "baseline"])
    def test_each_term_separately(self, problem, term):
        out, x1, clues, z = problem
        weight = mixing_weight(out, CFG)
        terms = {
            "commit": lambda o: commit_term(o, x1, clues, CFG),
            "mixing": lambda o: mixing_term(o, x1, clues, CFG, weight)[0],
            "progress": lambda o: progress_term(o, z, x1, clues, CFG),
            "baseline": lambda o: baseline_ce_loss(o, x1, clues),
        }

        def loss(logits, confidence, tau):
            return terms[term](ModelOutput(logits, confidence, tau))

        inputs = tuple(t.clone().requires_grad_() for t in (out.logits, out.confidence, out.tau))
        assert torch.autograd.gradcheck(loss, inputs, eps=1e-6, atol=1e-6)


def central_differences(model, loss_fn, coords, h=1e-4):
    params = list(model.parameters())
    flat = parameters_to_vector(params).detach().clone()
    values = []
    with torch.no_grad():
        for i in coords.tolist():
            shifted = flat.clone()
            shifted[i] += h
            vector_to_parameters(shifted, params)
            up = loss_fn().item()
            shifted[i] -= 2.0 * h
            vector_to_parameters(shifted, params)
            down = loss_fn().item()
            values.append((up - down) / (2.0 * h))
        vector_to_parameters(flat, params)
    return torch.tensor(values, dtype=torch.float64)


def analytic_gradient(model, loss_fn):
    params = list(model.parameters())
    grads = torch.autograd.grad(loss_fn(), params, allow_unused=True)
    return torch.cat([(torch.zeros_like(p) if g is None else g).reshape(-1) for p, g in zip(params, grads)])


class TestParameterGradients:
    """Backprop through the transformer against central differences on its weights"""

    @pytest.fixture
    def batch(self, float64, mini_instances):
        x0, x1, clues = stack_instances(mini_instances)
        # early on the path tau_true stays far from the untrained progress head
        z = sample_masking_path(x0, x1, clues, 0.2, Schedule("polynomial", 2.0), torch.Generator().manual_seed(3))
        return x1, clues, z

    @pytest.mark.parametrize("term", ["commit", "mixing", "progress", "baseline"])
    def test_matches_central_differences(self, batch, tiny_model, term):
        x1, clues, z = batch
        model = tiny_model("baseline" if term == "baseline" else "adaptive").double().eval()
        t = 0.2 if term == "baseline" else None
        with torch.no_grad():
            weight = mixing_weight(model(z, clues, t), CFG)
        terms = {
            "commit": lambda o: commit_term(o, x1, clues, CFG),
            "mixing": lambda o: mixing_term(o, x1, clues, CFG, weight)[0],
            "progress": lambda o: progress_term(o, z, x1, clues, CFG),
            "baseline": lambda o: baseline_ce_loss(o, x1, clues),
        }

        def loss_fn():
            return terms[term](model(z, clues, t))

        analytic = analytic_gradient(model, loss_fn)
        coords = torch.randperm(analytic.numel(), generator=torch.Generator().manual_seed(7))[:200]
        numeric = central_differences(model, loss_fn, coords)
        picked = analytic[coords]
        assert picked.abs().max() > 0
        error = (picked - numeric).norm() / torch.maximum(picked.norm(), numeric.norm())
        assert error < 1e-3

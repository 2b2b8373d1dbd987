import math

import numpy as np
import pytest
import torch

from cdtse.losses import LossBreakdown, multitask_loss, speaker_logits
from cdtse.metrics import sisdr_tensor


def _batch(seed=0, batch=4, samples=600, dim=16, speakers=5):
    rng = np.random.default_rng(seed)
    target = torch.tensor(rng.standard_normal((batch, samples)))
    estimate = target + 0.5 * torch.tensor(rng.standard_normal((batch, samples)))
    emb = torch.tensor(rng.standard_normal((batch, dim)))
    weight = torch.tensor(rng.standard_normal((speakers, dim)))
    labels = torch.tensor(rng.integers(0, speakers, size=batch))
    return target, estimate, emb, weight, labels


class TestSpeakerLogits:
    def test_zero_embedding_gives_zero_logits(self):
        weight = torch.randn(5, 16)
        assert torch.all(speaker_logits(torch.zeros(16), weight) == 0.0)

    def test_one_hot_embedding_selects_column(self):
        weight = torch.randn(5, 16)
        emb = torch.zeros(16)
        emb[3] = 1.0
        torch.testing.assert_close(speaker_logits(emb, weight), weight[:, 3])

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            speaker_logits(torch.zeros(8), torch.zeros(5, 16))

    def test_ce_gradient_wrt_weight_matches_finite_differences(self):
        target, estimate, emb, weight, labels = _batch(1)
        weight.requires_grad_(True)
        ce = torch.nn.functional.cross_entropy(speaker_logits(emb, weight), labels)
        ce.backward()
        rng = np.random.default_rng(2)
        h = 1e-6
        worst = 0.0
        for _ in range(25):
            i, j = rng.integers(0, weight.shape[0]), rng.integers(0, weight.shape[1])
            for sign in (+1, -1):
                w = weight.detach().clone()
                w[i, j] += sign * h
                value = torch.nn.functional.cross_entropy(
                    speaker_logits(emb, w), labels
                ).item()
                if sign > 0:
                    plus = value
                else:
                    minus = value
            fd = (plus - minus) / (2 * h)
            an = weight.grad[i, j].item()
            worst = max(worst, abs(fd - an) / max(abs(fd), abs(an), 1e-8))
        assert worst < 1e-5


class TestMultitaskLoss:
    def test_alpha_zero_is_pure_reconstruction(self):
        target, estimate, emb, weight, labels = _batch(3)
        loss = multitask_loss(target, estimate, emb, labels, weight, 0.0)
        expected = -sisdr_tensor(target, estimate).mean()
        assert loss.total.item() == expected.item()

    def test_uniform_logits_give_log_k(self):
        target, estimate, emb, weight, labels = _batch(4)
        loss = multitask_loss(target, estimate, emb, labels, torch.zeros_like(weight), 1.0)
        assert loss.ce.item() == pytest.approx(math.log(weight.shape[0]), abs=1e-6)

    def test_paper_weighting_composition(self):
        target, estimate, emb, weight, labels = _batch(5)
        loss = multitask_loss(target, estimate, emb, labels, weight, 0.5)
        assert loss.alpha == 0.5
        assert loss.total.item() == pytest.approx(
            loss.neg_sisdr.item() + 0.5 * loss.ce.item(), abs=1e-9
        )

    def test_breakdown_invariant_on_random_batches(self):
        for seed in range(10):
            target, estimate, emb, weight, labels = _batch(100 + seed)
            alpha = 0.1 * seed
            loss = multitask_loss(target, estimate, emb, labels, weight, alpha)
            assert isinstance(loss, LossBreakdown)
            assert abs(
                loss.total.item() - (loss.neg_sisdr.item() + alpha * loss.ce.item())
            ) <= 1e-9

    def test_ce_nonnegative_and_shrinks_when_correct(self):
        target, estimate, emb, weight, labels = _batch(6)
        loss = multitask_loss(target, estimate, emb, labels, weight, 1.0)
        assert loss.ce.item() >= 0.0
        # saturate logits toward the labels: ce goes to ~0
        strong = torch.zeros_like(weight)
        emb_onehot = torch.zeros_like(emb)
        for row, label in enumerate(labels):
            emb_onehot[row, row] = 1.0
            strong[label, row] = 50.0
        saturated = multitask_loss(target, estimate, emb_onehot, labels, strong, 1.0)
        assert saturated.ce.item() < 1e-6

    def test_invalid_label_rejected(self):
        target, estimate, emb, weight, _ = _batch(7)
        with pytest.raises(ValueError, match="invalid speaker label"):
            multitask_loss(target, estimate, emb, torch.tensor([0, 1, 2, 9]), weight, 0.5)

    def test_length_mismatch_rejected(self):
        target, estimate, emb, weight, labels = _batch(8)
        with pytest.raises(ValueError, match="length mismatch"):
            multitask_loss(target[:, :-1], estimate, emb, labels, weight, 0.5)

    def test_negative_alpha_rejected(self):
        target, estimate, emb, weight, labels = _batch(9)
        with pytest.raises(ValueError):
            multitask_loss(target, estimate, emb, labels, weight, -0.1)

    def test_total_invariant_to_estimate_rescaling(self):
        target, estimate, emb, weight, labels = _batch(10)
        base = multitask_loss(target, estimate, emb, labels, weight, 0.5)
        scaled = multitask_loss(target, 7.3 * estimate, emb, labels, weight, 0.5)
        assert scaled.total.item() == pytest.approx(base.total.item(), abs=1e-9)

    def test_single_gradient_step_descends(self):
        # small-step descent on a fixed micro-batch, 10 seeds, all must pass
        for seed in range(10):
            torch.manual_seed(seed)
            rng = np.random.default_rng(seed)
            target = torch.tensor(rng.standard_normal((3, 200)))
            estimate_source = torch.tensor(
                rng.standard_normal((3, 200)), requires_grad=True
            )
            emb = torch.tensor(rng.standard_normal((3, 8)), requires_grad=True)
            weight = torch.tensor(rng.standard_normal((4, 8)), requires_grad=True)
            labels = torch.tensor(rng.integers(0, 4, size=3))

            def value(est, e, w):
                return multitask_loss(target, est, e, labels, w, 0.5).total

            loss = value(estimate_source, emb, weight)
            loss.backward()
            lr = 1e-5
            with torch.no_grad():
                stepped = value(
                    estimate_source - lr * estimate_source.grad,
                    emb - lr * emb.grad,
                    weight - lr * weight.grad,
                )
            assert stepped.item() < loss.item()

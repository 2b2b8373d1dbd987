import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from cdtse.spatial import (
    IpdFusion,
    adapt,
    cd_fuse,
    channel_correlate,
    channel_decorrelate,
    decorrelation_scores,
    pairwise_softmax,
    parallel_fuse,
    row_cosine,
)

E = math.e
P_AT_PHI_ZERO = 1.0 / (1.0 + E)  # ~0.268941
P_AT_PHI_MINUS_ONE = 1.0 / (1.0 + E**2)  # ~0.119203


def _rand(shape, seed, dtype=torch.float64):
    rng = np.random.default_rng(seed)
    return torch.tensor(rng.standard_normal(shape), dtype=dtype)


def _orthogonal_rows(n, t, seed):
    """Two matrices whose corresponding rows are zero-mean and orthogonal."""
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((n, t))
    b = rng.standard_normal((n, t))
    a -= a.mean(axis=1, keepdims=True)
    b -= b.mean(axis=1, keepdims=True)
    proj = (np.sum(a * b, axis=1) / np.sum(a * a, axis=1))[:, None] * a
    b = b - proj
    b -= b.mean(axis=1, keepdims=True)  # stays orthogonal: a is zero-mean
    return torch.tensor(a), torch.tensor(b)


class TestRowCosine:
    def test_self_similarity_is_one(self):
        w = _rand((6, 20), 0)
        phi = row_cosine(w, w.clone())
        torch.testing.assert_close(phi, torch.ones(6, dtype=torch.float64), atol=1e-9, rtol=0)

    def test_antipodal_rows(self):
        w1 = torch.tensor([[1.0, -1.0, 1.0, -1.0]], dtype=torch.float64)
        w2 = torch.tensor([[-1.0, 1.0, -1.0, 1.0]], dtype=torch.float64)
        assert row_cosine(w1, w2).item() == pytest.approx(-1.0, abs=1e-12)

    def test_orthogonal_zero_mean_rows(self):
        w1 = torch.tensor([[1.0, 0.0, -1.0, 0.0]], dtype=torch.float64)
        w2 = torch.tensor([[0.0, 1.0, 0.0, -1.0]], dtype=torch.float64)
        assert abs(row_cosine(w1, w2).item()) < 1e-12

    def test_constant_row_yields_zero_not_nan(self):
        w1 = torch.zeros(2, 8, dtype=torch.float64)
        w2 = _rand((2, 8), 1)
        phi = row_cosine(w1, w2)
        assert torch.all(phi == 0.0)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            row_cosine(torch.zeros(2, 8), torch.zeros(2, 9))


class TestPairwiseSoftmax:
    def test_phi_one_is_exactly_half(self):
        p = pairwise_softmax(torch.tensor([1.0], dtype=torch.float64))
        assert p.item() == 0.5

    def test_phi_zero(self):
        p = pairwise_softmax(torch.tensor([0.0], dtype=torch.float64))
        assert p.item() == pytest.approx(P_AT_PHI_ZERO, abs=1e-12)

    def test_phi_minus_one(self):
        p = pairwise_softmax(torch.tensor([-1.0], dtype=torch.float64))
        assert p.item() == pytest.approx(P_AT_PHI_MINUS_ONE, abs=1e-12)

    def test_matches_explicit_formula(self):
        phi = torch.linspace(-1, 1, 41, dtype=torch.float64)
        p = pairwise_softmax(phi)
        explicit = torch.exp(phi) / (math.e + torch.exp(phi))
        torch.testing.assert_close(p, explicit, atol=1e-15, rtol=0)

    def test_rejects_nan(self):
        with pytest.raises(ValueError):
            pairwise_softmax(torch.tensor([float("nan")]))


class TestDecorrelationScores:
    def test_complement_of_half(self):
        s = decorrelation_scores(torch.full((4,), 0.5), 6)
        assert torch.all(s == 0.5)
        assert s.shape == (4, 6)

    def test_complement_of_phi_zero_probability(self):
        s = decorrelation_scores(torch.tensor([P_AT_PHI_ZERO], dtype=torch.float64), 3)
        assert s[0, 0].item() == pytest.approx(E / (1.0 + E), abs=1e-12)

    def test_all_columns_identical(self):
        p = torch.rand(8, dtype=torch.float64)
        s = decorrelation_scores(p, 17)
        assert all(torch.equal(s[:, j], s[:, 0]) for j in range(17))

    def test_rejects_empty(self):
        with pytest.raises(ValueError):
            decorrelation_scores(torch.rand(4), 0)


class TestChannelDecorrelate:
    def test_identical_inputs_halve(self):
        w = _rand((8, 16), 2)
        torch.testing.assert_close(
            channel_decorrelate(w, w.clone()), 0.5 * w, atol=1e-9, rtol=0
        )

    def test_orthogonal_rows_weight(self):
        w1, w2 = _orthogonal_rows(8, 32, 3)
        expected = (E / (1.0 + E)) * w2
        torch.testing.assert_close(channel_decorrelate(w1, w2), expected, atol=1e-6, rtol=0)

    def test_zero_auxiliary_channel(self):
        w1 = _rand((4, 10), 4)
        assert torch.all(channel_decorrelate(w1, torch.zeros_like(w1)) == 0.0)

    def test_score_range_and_monotonicity(self):
        # over phi in [-1, 1]: s(1) = 1/2 is the floor, s(-1) = e^2/(1+e^2)
        # the ceiling, and s decreases strictly in phi
        phi = torch.linspace(-1, 1, 201, dtype=torch.float64)
        s = 1.0 - pairwise_softmax(phi)
        assert torch.all(s >= 0.5 - 1e-9)
        assert torch.all(s <= E**2 / (1.0 + E**2) + 1e-9)
        assert torch.all(s[1:] < s[:-1])  # strictly decreasing in phi
        mid = 1.0 - pairwise_softmax(torch.tensor([0.0], dtype=torch.float64))
        assert mid.item() == pytest.approx(0.731059, abs=1e-6)

    def test_scale_invariance_of_scores(self):
        w1 = _rand((8, 16), 5)
        w2 = _rand((8, 16), 6)
        base = channel_decorrelate(w1, w2)
        for c in (0.01, 3.0, 250.0):
            scaled = channel_decorrelate(w1, c * w2)
            torch.testing.assert_close(scaled, c * base, rtol=1e-9, atol=1e-12)

    def test_gradients_match_finite_differences(self):
        w1 = _rand((8, 16), 7)
        w2 = _rand((8, 16), 8)
        w1.requires_grad_(True)
        w2.requires_grad_(True)
        weights = _rand((8, 16), 9)
        loss = (channel_decorrelate(w1, w2) * weights).sum()
        loss.backward()
        rng = np.random.default_rng(10)
        h = 1e-6
        worst = 0.0
        for grad, base in ((w1.grad, w1), (w2.grad, w2)):
            for _ in range(20):
                i, j = rng.integers(0, 8), rng.integers(0, 16)
                plus = base.detach().clone()
                plus[i, j] += h
                minus = base.detach().clone()
                minus[i, j] -= h
                if base is w1:
                    fd_p = (channel_decorrelate(plus, w2.detach()) * weights).sum()
                    fd_m = (channel_decorrelate(minus, w2.detach()) * weights).sum()
                else:
                    fd_p = (channel_decorrelate(w1.detach(), plus) * weights).sum()
                    fd_m = (channel_decorrelate(w1.detach(), minus) * weights).sum()
                fd = (fd_p.item() - fd_m.item()) / (2 * h)
                an = grad[i, j].item()
                worst = max(worst, abs(fd - an) / max(abs(fd), abs(an), 1e-8))
        assert worst < 1e-4

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            channel_decorrelate(torch.zeros(2, 8), torch.zeros(2, 9))


class TestChannelCorrelate:
    def test_identical_inputs_halve(self):
        w = _rand((8, 16), 11)
        torch.testing.assert_close(channel_correlate(w, w.clone()), 0.5 * w, atol=1e-9, rtol=0)

    def test_zero_auxiliary_channel(self):
        w1 = _rand((4, 10), 12)
        assert torch.all(channel_correlate(w1, torch.zeros_like(w1)) == 0.0)

    @settings(max_examples=25, deadline=None)
    @given(seed=st.integers(0, 2**16))
    def test_complement_identity(self, seed):
        w1 = _rand((6, 12), seed)
        w2 = _rand((6, 12), seed + 1)
        total = channel_correlate(w1, w2) + channel_decorrelate(w1, w2)
        torch.testing.assert_close(total, w2, rtol=1e-14, atol=1e-15)


class TestAdapt:
    def test_ones_is_identity(self):
        rep = _rand((5, 9), 13)
        assert torch.equal(adapt(rep, torch.ones(5, dtype=torch.float64)), rep)

    def test_zeros_annihilate(self):
        rep = _rand((5, 9), 14)
        assert torch.all(adapt(rep, torch.zeros(5, dtype=torch.float64)) == 0.0)

    def test_single_row_scaling(self):
        rep = _rand((4, 7), 15)
        emb = torch.ones(4, dtype=torch.float64)
        emb[2] = 2.0
        out = adapt(rep, emb)
        assert torch.equal(out[2], 2.0 * rep[2])
        for j in (0, 1, 3):
            assert torch.equal(out[j], rep[j])

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            adapt(torch.zeros(4, 7), torch.zeros(5))


class TestParallelFuse:
    def test_two_identical_reps_double(self):
        rep = _rand((6, 11), 16)
        torch.testing.assert_close(parallel_fuse([rep, rep.clone()]), 2.0 * rep)

    def test_ones_embedding_matches_plain_sum(self):
        a, b = _rand((6, 11), 17), _rand((6, 11), 18)
        fused = parallel_fuse([a, b], torch.ones(6, dtype=torch.float64))
        assert torch.equal(fused, parallel_fuse([a, b]))

    def test_sum_then_adapt_composition(self):
        a, b = _rand((4, 8), 19), _rand((4, 8), 20)
        emb = _rand((4,), 21)
        torch.testing.assert_close(parallel_fuse([a, b], emb), (a + b) * emb[:, None])

    def test_permutation_invariance(self):
        reps = [_rand((4, 8), s) for s in (22, 23, 24)]
        fused = parallel_fuse(reps)
        permuted = parallel_fuse([reps[2], reps[0], reps[1]])
        torch.testing.assert_close(fused, permuted, atol=1e-12, rtol=0)

    def test_rejects_bad_input(self):
        with pytest.raises(ValueError):
            parallel_fuse([_rand((4, 8), 25)])
        with pytest.raises(ValueError):
            parallel_fuse([torch.zeros(4, 8), torch.zeros(4, 9)])


class TestCdFuse:
    def test_zero_auxiliary_gives_reference(self):
        w1 = _rand((5, 10), 26)
        assert torch.equal(cd_fuse(w1, torch.zeros_like(w1)), w1)

    def test_ones_embedding_reduces_to_no_adapt(self):
        w1, w2 = _rand((5, 10), 27), _rand((5, 10), 28)
        withe = cd_fuse(w1, w2, torch.ones(5, dtype=torch.float64))
        without = cd_fuse(w1, w2)
        assert torch.equal(withe, without)

    def test_identical_channels_give_one_and_a_half(self):
        w = _rand((5, 10), 29)
        torch.testing.assert_close(cd_fuse(w, w.clone()), 1.5 * w, atol=1e-9, rtol=0)


class TestIpdFusion:
    def _build(self, seed=0):
        torch.manual_seed(seed)
        return IpdFusion(num_bins=33, channels=16, hidden=24, kernel=3)

    def test_zeroed_branch_depends_only_on_adapted_rep(self):
        fusion = self._build()
        for name, param in fusion.named_parameters():
            if not name.startswith("project."):
                torch.nn.init.zeros_(param)
        adapted = torch.randn(2, 16, 40)
        ipd = torch.rand(2, 33, 21) * 2 - 1
        out = fusion(adapted, ipd)
        # the concat's phase half is zero, so only the first 16 columns act
        expected = torch.nn.functional.conv1d(
            adapted, fusion.project.weight[:, :16, :]
        )
        torch.testing.assert_close(out, expected, atol=1e-6, rtol=1e-5)
        out2 = fusion(adapted, torch.rand(2, 33, 21) * 2 - 1)
        torch.testing.assert_close(out, out2, atol=0.0, rtol=0.0)

    def test_output_shape_independent_of_bin_count(self):
        for bins, frames in ((17, 9), (65, 33), (129, 100)):
            torch.manual_seed(1)
            fusion = IpdFusion(num_bins=bins, channels=8, hidden=12, kernel=3)
            out = fusion(torch.randn(1, 8, 50), torch.randn(1, bins, frames))
            assert out.shape == (1, 8, 50)

    def test_deterministic_under_fixed_parameters(self):
        fusion = self._build(2)
        adapted = torch.randn(1, 16, 30)
        ipd = torch.randn(1, 33, 15)
        a = fusion(adapted, ipd)
        b = fusion(adapted, ipd)
        assert torch.equal(a, b)

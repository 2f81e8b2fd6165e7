"""Tests for guided feature fusion (squeeze / excite / fuse)."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vmos.errors import ContractError
from vmos.sgm import FusionWeights, SgmParams, default_hidden, excite, fuse, guide, squeeze
from vmos.tensor import Tensor3


def rand_tensor(rng, c=6, h=4, w=5):
    return Tensor3(rng.normal(size=(c, h, w)))


class TestSqueeze:
    def test_equals_channel_means(self):
        rng = np.random.default_rng(0)
        x = rand_tensor(rng)
        np.testing.assert_allclose(squeeze(x), x.data.mean(axis=(1, 2)), rtol=1e-12)


class TestExcite:
    def test_zero_params_give_even_split(self):
        rng = np.random.default_rng(1)
        p = SgmParams.zeros(channels=6)
        w = excite(rng.normal(size=6), rng.normal(size=6), p)
        np.testing.assert_allclose(w.alpha, 0.5)
        np.testing.assert_allclose(w.beta, 0.5)

    def test_crafted_logit_pair(self):
        # all-zero weights and a bias of (ln 3, 0) on channel 0's logit pair
        c = 4
        p = SgmParams.zeros(channels=c)
        p.b2[0] = np.log(3.0)
        w = excite(np.zeros(c), np.zeros(c), p)
        assert w.alpha[0] == pytest.approx(0.75, rel=1e-12)
        assert w.beta[0] == pytest.approx(0.25, rel=1e-12)

    @given(seed=st.integers(0, 2**16))
    @settings(max_examples=30, deadline=None)
    def test_weights_sum_to_one(self, seed):
        rng = np.random.default_rng(seed)
        p = SgmParams.seeded(channels=6, seed=seed)
        w = excite(rng.normal(size=6), rng.normal(size=6), p)
        np.testing.assert_allclose(w.alpha + w.beta, 1.0, atol=1e-12)

    def test_shape_mismatch_rejected(self):
        p = SgmParams.zeros(channels=6)
        with pytest.raises(ContractError):
            excite(np.zeros(4), np.zeros(4), p)

    def test_default_hidden_floor(self):
        assert default_hidden(32) == 16
        assert default_hidden(8) == 8
        assert default_hidden(4) == 8


class TestFuse:
    def test_alpha_one_returns_task_exactly(self):
        rng = np.random.default_rng(2)
        a, b = rand_tensor(rng), rand_tensor(rng)
        w = FusionWeights(np.ones(6), np.zeros(6))
        assert np.array_equal(fuse(a, b, w).data, a.data)

    def test_alpha_half_is_elementwise_mean(self):
        rng = np.random.default_rng(3)
        a, b = rand_tensor(rng), rand_tensor(rng)
        w = FusionWeights(np.full(6, 0.5), np.full(6, 0.5))
        np.testing.assert_allclose(fuse(a, b, w).data, (a.data + b.data) / 2, rtol=1e-14)

    @given(seed=st.integers(0, 2**16))
    @settings(max_examples=30, deadline=None)
    def test_convex_hull_bound(self, seed):
        rng = np.random.default_rng(seed)
        a, b = rand_tensor(rng), rand_tensor(rng)
        beta = rng.random(6)
        out = fuse(a, b, FusionWeights(1.0 - beta, beta)).data
        lo = np.minimum(a.data, b.data)
        hi = np.maximum(a.data, b.data)
        assert np.all(out >= lo) and np.all(out <= hi)

    def test_shape_mismatch_rejected(self):
        rng = np.random.default_rng(4)
        w = FusionWeights(np.ones(6), np.zeros(6))
        with pytest.raises(ContractError):
            fuse(rand_tensor(rng), rand_tensor(rng, h=3), w)

    def test_bad_weights_rejected(self):
        with pytest.raises(ContractError):
            FusionWeights(np.full(4, 0.7), np.full(4, 0.7))
        with pytest.raises(ContractError):
            FusionWeights(np.array([1.2, 0.5, 0.5, 0.4]), np.array([-0.2, 0.5, 0.5, 0.6]))


class TestGuide:
    def test_zero_params_average_inputs(self):
        rng = np.random.default_rng(5)
        a, b = rand_tensor(rng), rand_tensor(rng)
        out = guide(a, b, SgmParams.zeros(channels=6))
        np.testing.assert_allclose(out.data, (a.data + b.data) / 2, rtol=1e-14)

    @given(seed=st.integers(0, 2**16))
    @settings(max_examples=30, deadline=None)
    def test_identical_inputs_pass_through_exactly(self, seed):
        rng = np.random.default_rng(seed)
        x = rand_tensor(rng)
        p = SgmParams.seeded(channels=6, seed=seed)
        assert np.array_equal(guide(x, x.copy(), p).data, x.data)

    def test_matches_manual_composition(self):
        rng = np.random.default_rng(6)
        a, b = rand_tensor(rng), rand_tensor(rng)
        p = SgmParams.seeded(channels=6, seed=99)
        w = excite(squeeze(a), squeeze(b), p)
        manual = a.data + w.beta[:, None, None] * (b.data - a.data)
        np.testing.assert_array_equal(guide(a, b, p).data, manual)

    def test_seeded_params_are_reproducible(self):
        p1 = SgmParams.seeded(channels=8, seed=7)
        p2 = SgmParams.seeded(channels=8, seed=7)
        assert np.array_equal(p1.w1, p2.w1) and np.array_equal(p1.w2, p2.w2)

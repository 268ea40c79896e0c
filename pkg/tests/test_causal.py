import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ci_sed import autodiff as ad
from ci_sed.autodiff import Tape, Tensor, check_gradients
from ci_sed.causal import (DEFAULT_LAMBDA, POOL_EPS, ContextPool, approx_backdoor, enhance, exact_backdoor,
                           pool_update, resample_frames, standardize_row)
from ci_sed.model import Classifier, Projection, aggregate_clip, frame_scores


def _net(rng, c, k, proj_scale=1.0):
    clf = Classifier(Tensor(rng.normal(size=(k, c)), requires_grad=True), Tensor(rng.normal(size=k), requires_grad=True))
    proj = Projection(Tensor(rng.normal(0, proj_scale, (c, k)), requires_grad=True),
                      Tensor(rng.normal(0, proj_scale, c), requires_grad=True))
    return clf, proj


def _random_pool(rng, k, n):
    q = np.stack([standardize_row(rng.normal(size=n), POOL_EPS) for _ in range(k)])
    return ContextPool(q)


class TestPoolUpdate:
    def test_default_rate(self):
        assert DEFAULT_LAMBDA == 0.01
        assert ContextPool.zeros(3, 4).lam == 0.01

    def test_zero_rate_on_standardized_row(self):
        rng = np.random.default_rng(0)
        pool = _random_pool(rng, 2, 9)
        pool.lam = 0.0
        out = pool_update(pool, rng.random((2, 9)), [0, 1])
        np.testing.assert_allclose(out.q, pool.q, rtol=0, atol=1e-9)

    def test_hand_standardization(self):
        pool = ContextPool.zeros(2, 4, lam=1.0)
        m = np.array([[1.0, 0.0, 0.0, 1.0], [0.3, 0.3, 0.3, 0.3]])
        out = pool_update(pool, m, [0])
        np.testing.assert_allclose(out.q[0], [1, -1, -1, 1], rtol=0, atol=1e-7)
        np.testing.assert_array_equal(out.q[1], 0.0)

    def test_absent_rows_bit_identical(self):
        rng = np.random.default_rng(1)
        pool = _random_pool(rng, 5, 12)
        out = pool_update(pool, rng.random((5, 12)), [1, 3])
        for j in (0, 2, 4):
            assert out.q[j].tobytes() == pool.q[j].tobytes()
        assert not np.array_equal(out.q[1], pool.q[1])

    def test_input_pool_not_mutated(self):
        rng = np.random.default_rng(2)
        pool = _random_pool(rng, 3, 6)
        before = pool.q.copy()
        pool_update(pool, rng.random((3, 6)), [0, 1, 2])
        np.testing.assert_array_equal(pool.q, before)

    def test_out_of_range(self):
        with pytest.raises(IndexError):
            pool_update(ContextPool.zeros(3, 4), np.zeros((3, 4)), [3])
        with pytest.raises(IndexError):
            pool_update(ContextPool.zeros(3, 4), np.zeros((3, 4)), [-1])

    def test_constant_row_flagged(self, caplog):
        with caplog.at_level(logging.WARNING, logger="ci_sed.causal"):
            out = pool_update(ContextPool.zeros(2, 4), np.full((2, 4), 0.5), [1])
        assert np.all(np.isfinite(out.q)) and np.all(out.q[1] == 0)
        assert "constant" in caplog.text

    def test_touch_counts(self):
        out = pool_update(ContextPool.zeros(3, 4), np.random.default_rng(3).random((3, 4)), [0, 2, 2])
        np.testing.assert_array_equal(out.touches, [1, 0, 1])

    def test_resampled_predictions(self):
        # clip with twice the pool length: nearest-neighbour picks every other frame
        pool = ContextPool.zeros(1, 3, lam=1.0)
        m = np.array([[0.0, 9.0, 1.0, 9.0, 2.0, 9.0]])
        np.testing.assert_array_equal(resample_frames(m, 3), [[9.0, 9.0, 9.0]])
        out = pool_update(pool, np.array([[0.0, 0.0, 1.0, 1.0, 2.0, 2.0]]), [0])
        np.testing.assert_allclose(out.q[0], standardize_row(np.array([0.0, 1.0, 2.0]), pool.eps))

    @settings(max_examples=80, deadline=None)
    @given(st.integers(1, 6), st.integers(2, 40), st.floats(1e-3, 10.0), st.integers(0, 2**31 - 1))
    def test_touched_rows_standardized(self, k, n, lam, seed):
        rng = np.random.default_rng(seed)
        pool = ContextPool(rng.normal(size=(k, n)) * 3, lam=lam)
        present = [j for j in range(k) if rng.random() < 0.5]
        out = pool_update(pool, rng.random((k, n)), present)
        for j in present:
            assert abs(out.q[j].mean()) < 1e-6
            assert abs(out.q[j].var() - 1.0) < 1e-6
        for j in set(range(k)) - set(present):
            assert out.q[j].tobytes() == pool.q[j].tobytes()


class TestEnhance:
    def test_zero_projection_identity(self):
        rng = np.random.default_rng(0)
        x = Tensor(rng.normal(size=(4, 7)))
        proj = Projection(Tensor(np.zeros((4, 3))), Tensor(np.zeros(4)))
        xe = enhance(x, _random_pool(rng, 3, 7), rng.random(3), proj)
        assert xe.data.tobytes() == x.data.tobytes()

    def test_zero_mask_without_bias_identity(self):
        rng = np.random.default_rng(1)
        x = Tensor(rng.normal(size=(4, 7)))
        proj = Projection(Tensor(rng.normal(size=(4, 3))), Tensor(np.zeros(4)))
        xe = enhance(x, _random_pool(rng, 3, 7), np.zeros(3), proj)
        np.testing.assert_array_equal(xe.data, x.data)

    def test_hand_case(self):
        x = Tensor([[2.0, 4.0]])
        proj = Projection(Tensor([[1.0]]), Tensor([0.0]))
        xe = enhance(x, np.array([[1.0, -1.0]]), [1.0], proj)
        np.testing.assert_array_equal(xe.data, [[4.0, 0.0]])

    def test_shape_mismatch(self):
        proj = Projection(Tensor(np.zeros((4, 3))), Tensor(np.zeros(4)))
        with pytest.raises(ValueError):
            enhance(Tensor(np.zeros((5, 7))), np.zeros((3, 7)), np.ones(3), proj)
        with pytest.raises(ValueError):
            enhance(Tensor(np.zeros((4, 7))), np.zeros((3, 7)), np.ones(2), proj)

    def test_batched_matches_single(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(3, 4, 7))
        mask = rng.random((3, 3))
        pool = _random_pool(rng, 3, 7)
        _, proj = _net(rng, 4, 3)
        batched = enhance(Tensor(x), pool, mask, proj).data
        for i in range(3):
            np.testing.assert_allclose(batched[i], enhance(Tensor(x[i]), pool, mask[i], proj).data,
                                       rtol=0, atol=1e-14)

    @pytest.mark.parametrize("seed", range(20))
    def test_gradients_reach_features_and_projection(self, seed):
        rng = np.random.default_rng(seed)
        x = Tensor(rng.normal(size=(3, 6)), requires_grad=True)
        _, proj = _net(rng, 3, 4)
        pool, mask = _random_pool(rng, 4, 6), rng.random(4)
        r = Tensor(rng.normal(size=(3, 6)))

        def build():
            return ad.total(ad.mul(enhance(x, pool, mask, proj), r))

        assert max(check_gradients(build, [x, proj.weight, proj.bias])) < 1e-6

    def test_pool_receives_no_gradient(self):
        rng = np.random.default_rng(3)
        x = Tensor(rng.normal(size=(3, 6)), requires_grad=True)
        _, proj = _net(rng, 3, 4)
        pool = _random_pool(rng, 4, 6)
        before = pool.q.copy()
        with Tape() as tape:
            tape.backward(ad.total(enhance(x, pool, np.ones(4), proj)))
        np.testing.assert_array_equal(pool.q, before)
        assert all(op.output is not pool.q for op in tape.ops)


class TestBackdoor:
    @pytest.mark.parametrize("seed", range(20))
    def test_single_stratum_collapse(self, seed):
        rng = np.random.default_rng(seed)
        c, n = rng.integers(1, 6), rng.integers(1, 10)
        x = Tensor(rng.normal(size=(c, n)))
        clf, proj = _net(rng, c, 1)
        pool = _random_pool(rng, 1, n)
        exact = exact_backdoor(x, pool, clf, proj)
        approx = approx_backdoor(x, pool, [1.0], clf, proj).data
        np.testing.assert_allclose(exact, approx, rtol=0, atol=1e-12)

    @pytest.mark.parametrize("seed", range(10))
    def test_degenerate_equal_rows(self, seed):
        # equal pool rows and equal projection columns make every stratum's
        # context identical to the 1/k-weighted sum, so both paths coincide
        rng = np.random.default_rng(seed)
        k, c, n = 4, 5, 8
        x = Tensor(rng.normal(size=(c, n)))
        clf, _ = _net(rng, c, k)
        col = rng.normal(size=(c, 1))
        w = np.repeat(col, k, axis=1)
        proj = Projection(Tensor(w * k), Tensor(rng.normal(size=c)))
        row = standardize_row(rng.normal(size=n), POOL_EPS)
        pool = ContextPool(np.tile(row, (k, 1)))
        exact = exact_backdoor(x, pool, clf, proj)
        approx = approx_backdoor(x, pool, np.ones(k), clf, proj).data
        np.testing.assert_allclose(exact, approx, rtol=0, atol=1e-12)

    def test_k3_is_mean_of_per_context_passes(self):
        rng = np.random.default_rng(4)
        k, c, n = 3, 4, 6
        x = Tensor(rng.normal(size=(c, n)))
        clf, proj = _net(rng, c, k)
        pool = _random_pool(rng, k, n)
        passes = []
        for i in range(k):
            # recompute pass i by hand: gate from row i only
            gate = proj.weight.data[:, i:i + 1] * pool.q[i][None, :] + proj.bias.data[:, None]
            xe = x.data + x.data * gate
            m = 1 / (1 + np.exp(-(clf.weight.data @ xe + clf.bias.data[:, None])))
            passes.append(m.mean(axis=1))
        np.testing.assert_allclose(exact_backdoor(x, pool, clf, proj), np.mean(passes, axis=0), rtol=0, atol=1e-12)

    def test_zero_projection_reduces_to_baseline(self):
        rng = np.random.default_rng(5)
        x = Tensor(rng.normal(size=(4, 9)))
        clf, _ = _net(rng, 4, 5)
        proj = Projection(Tensor(np.zeros((4, 5))), Tensor(np.zeros(4)))
        base = aggregate_clip(frame_scores(x, clf)).data
        got = approx_backdoor(x, _random_pool(rng, 5, 9), rng.random(5), clf, proj).data
        assert got.tobytes() == base.tobytes()
        np.testing.assert_allclose(exact_backdoor(x, _random_pool(rng, 5, 9), clf, proj), base, rtol=0, atol=1e-15)

    def test_batched_exact_matches_single(self):
        rng = np.random.default_rng(6)
        k, c, n = 3, 4, 5
        x = rng.normal(size=(2, c, n))
        clf, proj = _net(rng, c, k)
        pool = _random_pool(rng, k, n)
        batched = exact_backdoor(Tensor(x), pool, clf, proj)
        for i in range(2):
            np.testing.assert_allclose(batched[i], exact_backdoor(Tensor(x[i]), pool, clf, proj), rtol=0, atol=1e-14)

    def test_uniform_priors(self):
        np.testing.assert_array_equal(ContextPool.zeros(4, 3).class_priors, np.full(4, 0.25))

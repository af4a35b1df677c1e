import math

import numpy as np
import pytest

from ripple_attention.kernel import (
    MhaParams,
    attend,
    attend_backward,
    attend_dense,
    attend_sparse,
    count_macs,
)
from ripple_attention.pattern import PatternSpec, build_mask, nnz

KINDS = [
    PatternSpec.full(),
    PatternSpec.band(4),
    PatternSpec.ripple(4, 3),
    PatternSpec.blockwise(5),
]


def naive_attention(q, k, v, params, m):
    """Row-by-row loops over heads; no vectorized softmax."""
    L = q.shape[0]
    heads = []
    for i in range(params.n_heads):
        wq, wk, wv = params.head(i)
        qi, ki, vi = q @ wq, k @ wk, v @ wv
        out = np.zeros_like(vi)
        for r in range(L):
            cols = [c for c in range(L) if m[r, c]]
            scores = [qi[r] @ ki[c] / math.sqrt(params.d_head) for c in cols]
            top = max(scores)
            weights = [math.exp(s - top) for s in scores]
            total = sum(weights)
            for c, wgt in zip(cols, weights):
                out[r] += wgt / total * vi[c]
        heads.append(out)
    return np.concatenate(heads, axis=1) @ params.wo


def random_case(rng, L, d_model=16, n_heads=4):
    params = MhaParams.random(d_model, n_heads, rng)
    q, k, v = rng.standard_normal((3, L, d_model))
    return q, k, v, params


class TestMhaParams:
    def test_heads_must_divide(self):
        with pytest.raises(ValueError):
            MhaParams.random(10, 3)

    def test_non_finite(self):
        p = MhaParams.random(8, 2, 0)
        with pytest.raises(ValueError):
            MhaParams(p.wq * np.nan, p.wk, p.wv, p.wo, 2)

    def test_head_blocks(self):
        p = MhaParams.random(8, 2, 0)
        wq, _, _ = p.head(1)
        np.testing.assert_array_equal(wq, p.wq[:, 4:])


class TestDense:
    @pytest.mark.parametrize("spec", KINDS, ids=lambda s: s.label())
    def test_against_naive_loops(self, rng, spec):
        q, k, v, p = random_case(rng, 9, 8, 2)
        m = build_mask(spec, 9)
        np.testing.assert_allclose(attend_dense(q, k, v, p, m), naive_attention(q, k, v, p, m.m),
                                   rtol=0, atol=1e-12)

    def test_single_frame(self, rng):
        q, k, v, p = random_case(rng, 1)
        out = attend_dense(q, k, v, p, build_mask(PatternSpec.full(), 1))
        np.testing.assert_allclose(out, (v @ p.wv) @ p.wo, atol=1e-14)

    def test_zero_queries_average_values(self, rng):
        L = 10
        _, k, v, p = random_case(rng, L)
        spec = PatternSpec.ripple(2, 3)
        m = build_mask(spec, L).m
        out = attend_dense(np.zeros((L, 16)), k, v, p, build_mask(spec, L))
        expected = (m / m.sum(axis=1, keepdims=True)) @ (v @ p.wv) @ p.wo
        np.testing.assert_allclose(out, expected, atol=1e-12)

    def test_all_true_mask_matches_unmasked_path(self, rng):
        q, k, v, p = random_case(rng, 12)
        masked = attend_dense(q, k, v, p, build_mask(PatternSpec.full(), 12))
        plain = attend_dense(q, k, v, p, np.ones((12, 12), bool))
        np.testing.assert_allclose(masked, plain, rtol=0, atol=1e-12)

    def test_empty_row_rejected(self, rng):
        q, k, v, p = random_case(rng, 4)
        m = np.eye(4, dtype=bool)
        m[2, 2] = False
        with pytest.raises(ValueError, match="at least one"):
            attend_dense(q, k, v, p, m)

    def test_non_finite_input(self, rng):
        q, k, v, p = random_case(rng, 4)
        q[0, 0] = np.inf
        with pytest.raises(ValueError):
            attend_dense(q, k, v, p, np.ones((4, 4), bool))

    def test_row_stochastic(self, rng):
        q, k, v, p = random_case(rng, 20)
        m = build_mask(PatternSpec.ripple(4, 3), 20)
        _, cache = attend_dense(q, k, v, p, m, return_cache=True)
        np.testing.assert_allclose(cache.probs.sum(axis=-1), 1.0, atol=1e-12)
        assert np.all(cache.probs[:, ~m.m] == 0.0)

    def test_permutation_equivariance(self, rng):
        q, k, v, p = random_case(rng, 15)
        perm = rng.permutation(15)
        full = build_mask(PatternSpec.full(), 15)
        out = attend_dense(q, k, v, p, full)
        out_perm = attend_dense(q[perm], k[perm], v[perm], p, full)
        np.testing.assert_allclose(out_perm, out[perm], atol=1e-12)


class TestSparse:
    @pytest.mark.parametrize("spec", KINDS + [PatternSpec.band(0), PatternSpec.ripple(0, 1)],
                             ids=lambda s: s.label())
    @pytest.mark.parametrize("L", [1, 2, 7, 32, 100])
    def test_matches_dense(self, rng, spec, L):
        q, k, v, p = random_case(rng, L)
        np.testing.assert_allclose(attend_sparse(q, k, v, p, spec),
                                   attend_dense(q, k, v, p, build_mask(spec, L)),
                                   rtol=0, atol=1e-9)

    def test_ripple_example(self, rng):
        q, k, v, p = random_case(rng, 32)
        spec = PatternSpec.ripple(4, 3)
        diff = attend_sparse(q, k, v, p, spec) - attend_dense(q, k, v, p, build_mask(spec, 32))
        assert np.abs(diff).max() < 1e-9

    def test_wide_band_equals_full(self, rng):
        L = 11
        q, k, v, p = random_case(rng, L)
        np.testing.assert_array_equal(attend_sparse(q, k, v, p, PatternSpec.band(2 * (L - 1))),
                                      attend_sparse(q, k, v, p, PatternSpec.full()))

    def test_masked_keys_have_no_influence(self, rng):
        L = 40
        q, k, v, p = random_case(rng, L)
        spec = PatternSpec.ripple(4, 7)
        m = build_mask(spec, L).m
        base = attend_sparse(q, k, v, p, spec)
        for row in (0, 17, 39):
            k2, v2 = k.copy(), v.copy()
            blocked = ~m[row]
            k2[blocked] += rng.standard_normal((blocked.sum(), 16)) * 5
            v2[blocked] += rng.standard_normal((blocked.sum(), 16)) * 5
            out = attend_sparse(q, k2, v2, p, spec)
            np.testing.assert_array_equal(out[row], base[row])

    def test_row_stochastic(self, rng):
        q, k, v, p = random_case(rng, 30)
        _, cache = attend_sparse(q, k, v, p, PatternSpec.ripple(4, 3), return_cache=True)
        np.testing.assert_allclose(cache.probs.sum(axis=1), 1.0, atol=1e-12)

    @pytest.mark.parametrize("spec", KINDS, ids=lambda s: s.label())
    def test_instrumented_counter(self, rng, spec):
        L, d_model = 50, 16
        q, k, v, p = random_case(rng, L, d_model)
        with count_macs() as counter:
            attend_sparse(q, k, v, p, spec)
        assert counter.scores == nnz(spec, L) * d_model
        assert counter.context == nnz(spec, L) * d_model

    def test_counter_off_by_default(self, rng):
        q, k, v, p = random_case(rng, 5)
        with count_macs() as counter:
            pass
        attend_sparse(q, k, v, p, PatternSpec.full())
        assert counter.total == 0

    def test_dispatch(self, rng):
        q, k, v, p = random_case(rng, 9)
        spec = PatternSpec.band(2)
        np.testing.assert_allclose(attend(q, k, v, p, spec, kernel="dense"),
                                   attend(q, k, v, p, spec, kernel="sparse"), atol=1e-12)
        with pytest.raises(ValueError):
            attend(q, k, v, p, spec, kernel="gpu")


def _finite_difference(fn, arrays, step=1e-5):
    grads = []
    for arr in arrays:
        g = np.empty_like(arr)
        for idx in np.ndindex(arr.shape):
            saved = arr[idx]
            arr[idx] = saved + step
            up = fn()
            arr[idx] = saved - step
            down = fn()
            arr[idx] = saved
            g[idx] = (up - down) / (2 * step)
        grads.append(g)
    return grads


class TestBackward:
    @pytest.mark.parametrize("kernel", ["dense", "sparse"])
    def test_finite_differences(self, rng, kernel):
        L, d_model, heads = 6, 8, 2
        q, k, v, p = random_case(rng, L, d_model, heads)
        spec = PatternSpec.ripple(2, 2)
        upstream = rng.standard_normal((L, d_model))

        def loss():
            return float(np.sum(attend(q, k, v, p, spec, kernel=kernel) * upstream))

        _, cache = attend(q, k, v, p, spec, kernel=kernel, return_cache=True)
        g = attend_backward(upstream, cache)
        numeric = _finite_difference(loss, [q, k, v, p.wq, p.wk, p.wv, p.wo])
        for analytic, num in zip([g.dq, g.dk, g.dv, g.wq, g.wk, g.wv, g.wo], numeric):
            rel = np.abs(analytic - num) / np.maximum(np.maximum(np.abs(analytic), np.abs(num)), 1e-7)
            assert rel.max() <= 1e-5

    def test_zero_upstream(self, rng):
        q, k, v, p = random_case(rng, 8)
        _, cache = attend_sparse(q, k, v, p, PatternSpec.ripple(4, 3), return_cache=True)
        g = attend_backward(np.zeros((8, 16)), cache)
        for arr in (g.dq, g.dk, g.dv, g.wq, g.wk, g.wv, g.wo):
            assert not arr.any()

    @pytest.mark.parametrize("spec", KINDS, ids=lambda s: s.label())
    def test_sparse_equals_dense(self, rng, spec):
        L = 16
        q, k, v, p = random_case(rng, L)
        upstream = rng.standard_normal((L, 16))
        _, cs = attend_sparse(q, k, v, p, spec, return_cache=True)
        _, cd = attend_dense(q, k, v, p, build_mask(spec, L), return_cache=True)
        gs, gd = attend_backward(upstream, cs), attend_backward(upstream, cd)
        for name in ("dq", "dk", "dv", "wq", "wk", "wv", "wo"):
            np.testing.assert_allclose(getattr(gs, name), getattr(gd, name), rtol=0, atol=1e-8)

    def test_requires_cache(self):
        with pytest.raises(RuntimeError):
            attend_backward(np.zeros((2, 4)), None)

    def test_shape_check(self, rng):
        q, k, v, p = random_case(rng, 4)
        _, cache = attend_sparse(q, k, v, p, PatternSpec.full(), return_cache=True)
        with pytest.raises(ValueError):
            attend_backward(np.zeros((5, 16)), cache)

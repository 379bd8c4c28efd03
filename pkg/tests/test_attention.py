import math

import numpy as np
import pytest

from minutecast.autodiff import Tensor, backward
from minutecast.attention import (
    DotProductCounter,
    MultiHeadAttention,
    default_sample_count,
    default_top_u,
    full_attention,
    probsparse_attention,
    sparsity_measure,
    sparsity_values_from_scores,
)
from minutecast.errors import ConfigError, ContractError, DimensionError

from conftest import check_gradients, rand_tensor


def scalar_sparsity_oracle(q, k):
    """Two-pass scalar evaluation: LSE of scaled scores minus their mean."""
    scale = 1.0 / math.sqrt(q.shape[1])
    out = []
    for qi in q:
        scores = [float(qi @ kj) * scale for kj in k]
        lse = math.log(sum(math.exp(s) for s in scores))
        out.append(lse - sum(scores) / len(scores))
    return np.array(out)


class TestFullAttention:
    def test_single_key_returns_value_row(self, rng):
        q = Tensor(rng.normal(size=(4, 3)))
        k = Tensor(rng.normal(size=(1, 3)))
        v = Tensor(rng.normal(size=(1, 5)))
        out = full_attention(q, k, v)
        for i in range(4):
            np.testing.assert_allclose(out.data[i], v.data[0], atol=1e-15)

    def test_orthonormal_large_scale_limit(self, rng):
        d = 6
        q = Tensor(np.eye(d) * 20.0)
        k = Tensor(np.eye(d) * 20.0)
        v = Tensor(rng.normal(size=(d, 4)))
        out = full_attention(q, k, v)
        assert np.abs(out.data - v.data).max() < 1e-6

    def test_uniform_keys_give_uniform_weights(self, rng):
        q = Tensor(rng.normal(size=(3, 4)))
        k = Tensor(np.tile(rng.normal(size=(1, 4)), (5, 1)))
        v = Tensor(rng.normal(size=(5, 2)))
        out = full_attention(q, k, v)
        np.testing.assert_allclose(
            out.data, np.tile(v.data.mean(axis=0), (3, 1)), atol=1e-12
        )

    def test_causal_ignores_future(self, rng):
        q = Tensor(rng.normal(size=(5, 3)))
        k = Tensor(rng.normal(size=(5, 3)))
        v = rng.normal(size=(5, 2))
        out_a = full_attention(q, k, Tensor(v), causal=True).data
        v2 = v.copy()
        v2[4] += 100.0
        out_b = full_attention(q, k, Tensor(v2), causal=True).data
        np.testing.assert_allclose(out_a[:4], out_b[:4], atol=1e-12)
        assert np.abs(out_a[4] - out_b[4]).max() > 1.0

    def test_requires_square_for_causal(self, rng):
        with pytest.raises(DimensionError):
            full_attention(
                Tensor(rng.normal(size=(3, 2))),
                Tensor(rng.normal(size=(4, 2))),
                Tensor(rng.normal(size=(4, 2))),
                causal=True,
            )

    def test_mismatched_widths(self, rng):
        with pytest.raises(DimensionError):
            full_attention(
                Tensor(rng.normal(size=(3, 2))),
                Tensor(rng.normal(size=(3, 5))),
                Tensor(rng.normal(size=(3, 5))),
            )

    def test_counter_counts_quadratic(self, rng):
        counter = DotProductCounter()
        q = Tensor(rng.normal(size=(7, 3)))
        k = Tensor(rng.normal(size=(9, 3)))
        v = Tensor(rng.normal(size=(9, 3)))
        full_attention(q, k, v, counter=counter)
        assert counter.count == 7 * 9

    def test_gradient(self, rng):
        q = rand_tensor(rng, (4, 3))
        k = rand_tensor(rng, (5, 3))
        v = rand_tensor(rng, (5, 2))
        w = Tensor(rng.normal(size=(4, 2)))
        check_gradients(lambda: (full_attention(q, k, v) * w).sum(), [q, k, v])


class TestSparsityMeasure:
    def test_constant_scores_hit_lower_bound(self):
        q = Tensor(np.zeros((6, 4)))
        k = Tensor(np.ones((8, 4)))
        scores = sparsity_measure(q, k, mode="exact")
        np.testing.assert_allclose(scores.values, math.log(8), atol=1e-12)

    def test_lower_bound_holds(self, rng):
        for _ in range(20):
            q = Tensor(rng.normal(size=(10, 5)) * 2)
            k = Tensor(rng.normal(size=(12, 5)) * 2)
            scores = sparsity_measure(q, k, mode="exact")
            assert (scores.values >= math.log(12) - 1e-9).all()

    def test_shift_invariance_of_values(self, rng):
        raw = rng.normal(size=(6, 9)) * 3
        for c in (-1000.0, -2.5, 0.1, 777.0):
            a = sparsity_values_from_scores(raw)
            b = sparsity_values_from_scores(raw + c)
            assert np.abs(a - b).max() < 1e-12

    def test_matches_scalar_oracle(self, rng):
        q = rng.normal(size=(8, 8))
        k = rng.normal(size=(8, 8))
        got = sparsity_measure(Tensor(q), Tensor(k), mode="exact").values
        np.testing.assert_allclose(got, scalar_sparsity_oracle(q, k), atol=1e-12)

    def test_top_u_ties_break_low_index(self):
        q = Tensor(np.zeros((5, 3)))
        k = Tensor(np.zeros((4, 3)))
        scores = sparsity_measure(q, k, mode="exact", top_u=3)
        np.testing.assert_array_equal(scores.top_indices, [0, 1, 2])

    def test_selection_invariants(self, rng):
        q = Tensor(rng.normal(size=(16, 4)))
        k = Tensor(rng.normal(size=(16, 4)))
        scores = sparsity_measure(q, k, mode="exact")
        assert scores.n_selected == default_top_u(16)
        assert scores.n_selected <= 16
        assert len(set(scores.top_indices.tolist())) == scores.n_selected
        ranked = scores.values[scores.top_indices]
        assert (np.diff(ranked) <= 1e-15).all()

    def test_sampled_mode_records_sample_count(self, rng):
        q = Tensor(rng.normal(size=(32, 4)))
        k = Tensor(rng.normal(size=(32, 4)))
        scores = sparsity_measure(q, k, mode="sampled", rng=rng)
        assert scores.mode == "sampled"
        assert scores.sample_count == default_sample_count(32)

    def test_sample_count_above_keys_rejected(self, rng):
        q = Tensor(rng.normal(size=(4, 3)))
        k = Tensor(rng.normal(size=(4, 3)))
        with pytest.raises(ContractError):
            sparsity_measure(q, k, mode="sampled", sample_count=9, rng=rng)

    def test_counter_exact_vs_sampled(self, rng):
        exact, sampled = DotProductCounter(), DotProductCounter()
        q = Tensor(rng.normal(size=(64, 8)))
        k = Tensor(rng.normal(size=(64, 8)))
        sparsity_measure(q, k, mode="exact", counter=exact)
        sparsity_measure(q, k, mode="sampled", sample_count=16, rng=rng, counter=sampled)
        assert exact.count == 64 * 64
        assert sampled.count == 64 * 16


class TestProbSparse:
    @pytest.mark.parametrize("causal", [False, True])
    def test_degenerate_selection_equals_full(self, rng, causal):
        for _ in range(25):
            q = rand_tensor(rng, (16, 8), requires_grad=False)
            k = rand_tensor(rng, (16, 8), requires_grad=False)
            v = rand_tensor(rng, (16, 8), requires_grad=False)
            dense = full_attention(q, k, v, causal=causal).data
            sparse = probsparse_attention(
                q, k, v, causal=causal, mode="exact", top_u=16
            ).data
            assert np.abs(dense - sparse).max() < 1e-10

    def test_lazy_queries_get_value_mean(self, rng):
        q = Tensor(rng.normal(size=(8, 4)))
        k = Tensor(rng.normal(size=(8, 4)))
        v = Tensor(rng.normal(size=(8, 3)))
        scores = sparsity_measure(q, k, mode="exact", top_u=2)
        out = probsparse_attention(q, k, v, mode="exact", top_u=2).data
        lazy = sorted(set(range(8)) - set(scores.top_indices.tolist()))
        for i in lazy:
            np.testing.assert_allclose(out[i], v.data.mean(axis=0), atol=1e-12)

    def test_causal_lazy_queries_get_running_mean(self, rng):
        q = Tensor(rng.normal(size=(6, 4)))
        k = Tensor(rng.normal(size=(6, 4)))
        v = Tensor(rng.normal(size=(6, 3)))
        out = probsparse_attention(q, k, v, causal=True, mode="exact", top_u=1).data
        sel = np.argsort(
            -_causal_values_for_test(q.data, k.data), kind="stable"
        )[:1]
        for i in range(6):
            if i in sel:
                continue
            np.testing.assert_allclose(
                out[i], v.data[: i + 1].mean(axis=0), atol=1e-12
            )

    def test_u_out_of_range(self, rng):
        q = Tensor(rng.normal(size=(4, 3)))
        with pytest.raises(ContractError):
            probsparse_attention(q, q, q, top_u=5)

    def test_counter_exact_reuses_measurement(self, rng):
        counter = DotProductCounter()
        q = Tensor(rng.normal(size=(64, 8)))
        probsparse_attention(q, q, q, mode="exact", counter=counter)
        assert counter.count == 64 * 64

    def test_counter_sampled_budget(self, rng):
        counter = DotProductCounter()
        q = Tensor(rng.normal(size=(64, 8)))
        u, m = default_top_u(64), default_sample_count(64)
        probsparse_attention(q, q, q, mode="sampled", rng=rng, counter=counter)
        assert counter.count == 64 * m + u * 64

    def test_sampled_scaling_is_subquadratic(self, rng):
        counts = {}
        for length in (64, 256):
            counter = DotProductCounter()
            q = Tensor(rng.normal(size=(length, 8)))
            probsparse_attention(q, q, q, mode="sampled", rng=rng, counter=counter)
            counts[length] = counter.count
        ratio = counts[256] / counts[64]
        assert ratio < (256 / 64) ** 2
        predicted = (256 * math.log(256)) / (64 * math.log(64))
        assert ratio < 2 * predicted

    def test_gradient_flows_through_selection_and_fill(self, rng):
        q = rand_tensor(rng, (6, 4), 0.5)
        k = rand_tensor(rng, (6, 4), 0.5)
        v = rand_tensor(rng, (6, 3), 0.5)
        w = Tensor(rng.normal(size=(6, 3)))
        check_gradients(
            lambda: (probsparse_attention(q, k, v, mode="exact", top_u=2) * w).sum(),
            [q, k, v],
            tol=1e-4,
        )

    def test_batched_matches_loop(self, rng):
        q = rng.normal(size=(3, 2, 10, 4))
        k = rng.normal(size=(3, 2, 10, 4))
        v = rng.normal(size=(3, 2, 10, 4))
        batched = probsparse_attention(
            Tensor(q), Tensor(k), Tensor(v), mode="exact", top_u=4
        ).data
        for i in range(3):
            for j in range(2):
                single = probsparse_attention(
                    Tensor(q[i, j]), Tensor(k[i, j]), Tensor(v[i, j]),
                    mode="exact", top_u=4,
                ).data
                np.testing.assert_allclose(batched[i, j], single, atol=1e-12)


def _causal_values_for_test(q, k):
    scale = 1.0 / math.sqrt(q.shape[1])
    scores = q @ k.T * scale
    vals = []
    for i in range(len(q)):
        prefix = scores[i, : i + 1]
        mx = prefix.max()
        lse = math.log(np.exp(prefix - mx).sum()) + mx
        vals.append(lse - prefix.mean())
    return np.array(vals)


class TestMultiHead:
    def test_single_head_identity_projections(self, rng):
        mha = MultiHeadAttention(4, 1, rng, kind="full")
        for lin in (mha.w_query, mha.w_key, mha.w_value, mha.w_out):
            lin.weight.data[:] = np.eye(4)
            lin.bias.data[:] = 0.0
        q = Tensor(rng.normal(size=(5, 4)))
        k = Tensor(rng.normal(size=(5, 4)))
        v = Tensor(rng.normal(size=(5, 4)))
        np.testing.assert_allclose(
            mha(q, k, v).data, full_attention(q, k, v).data, atol=1e-12
        )

    @pytest.mark.parametrize("heads", [1, 2, 4])
    @pytest.mark.parametrize("kind", ["full", "probsparse"])
    def test_output_shape(self, rng, heads, kind):
        mha = MultiHeadAttention(16, heads, rng, kind=kind)
        x = Tensor(rng.normal(size=(12, 16)))
        assert mha(x, x, x).shape == (12, 16)
        xb = Tensor(rng.normal(size=(3, 12, 16)))
        assert mha(xb, xb, xb).shape == (3, 12, 16)

    def test_divisibility_enforced(self, rng):
        with pytest.raises(ConfigError):
            MultiHeadAttention(10, 3, rng)

    def test_unknown_kind(self, rng):
        with pytest.raises(ConfigError):
            MultiHeadAttention(8, 2, rng, kind="linear")

    def test_two_head_probsparse_gradient(self, rng):
        mha = MultiHeadAttention(8, 2, rng, kind="probsparse", mode="exact")
        x = rand_tensor(rng, (6, 8), 0.5)
        w = Tensor(rng.normal(size=(6, 8)))
        params = [x] + mha.parameters()
        check_gradients(lambda: (mha(x, x, x) * w).sum(), params, tol=1e-4)

import csv
import math

import numpy as np
import pytest

from errors import IndivisibleChannels, OutOfRangeLayer, ShapeMismatch
from nn_core import grad_check
from self_attention import (
    AttentionParams,
    attention_parameter_count,
    attn_footprint,
    attn_forward,
    attn_forward_vjp,
    attn_init,
    write_attention_csv,
)


def naive_attention(F, params):
    """Explicit index loops only."""
    L, C = F.shape
    W = params.w_q.shape[1]
    p = params.p
    keys = -(-L // p)

    q = [[0.0] * W for _ in range(L)]
    k = [[0.0] * W for _ in range(L)]
    v = [[0.0] * W for _ in range(L)]
    for t in range(L):
        for j in range(W):
            for c in range(C):
                q[t][j] += F[t, c] * params.w_q[c, j]
                k[t][j] += F[t, c] * params.w_k[c, j]
                v[t][j] += F[t, c] * params.w_v[c, j]

    k_pool = [[0.0] * W for _ in range(keys)]
    v_pool = [[0.0] * W for _ in range(keys)]
    for m in range(keys):
        for j in range(W):
            k_best = v_best = None
            for t in range(m * p, min((m + 1) * p, L)):
                k_best = k[t][j] if k_best is None or k[t][j] > k_best else k_best
                v_best = v[t][j] if v_best is None or v[t][j] > v_best else v_best
            k_pool[m][j] = k_best
            v_pool[m][j] = v_best

    attn = np.zeros((L, keys))
    f_tilde = np.zeros((L, C))
    for i in range(L):
        scores = [0.0] * keys
        for m in range(keys):
            for j in range(W):
                scores[m] += q[i][j] * k_pool[m][j]
        top = max(scores)
        total = 0.0
        for m in range(keys):
            total += math.exp(scores[m] - top)
        for m in range(keys):
            attn[i, m] = math.exp(scores[m] - top) / total

        context = [0.0] * W
        for j in range(W):
            for m in range(keys):
                context[j] += attn[i, m] * v_pool[m][j]
        for c in range(C):
            out = 0.0
            for j in range(W):
                out += context[j] * params.w_o[j, c]
            f_tilde[i, c] = params.beta * out + F[i, c]
    return f_tilde, attn


@pytest.mark.parametrize("channels, k, width", [(16, 8, 2), (64, 8, 8), (8, 1, 8)])
def test_init_widths(channels, k, width):
    params = attn_init(channels, k=k, p=4, rng=0)
    assert params.w_q.shape == (channels, width)
    assert params.w_k.shape == (channels, width)
    assert params.w_v.shape == (channels, width)
    assert params.w_o.shape == (width, channels)
    assert params.beta == 0.0
    total = sum(a.size for a in params.arrays().values()) + 1
    assert total == attention_parameter_count(channels, k)


def test_init_rejects_indivisible_channels():
    with pytest.raises(IndivisibleChannels):
        attn_init(12, k=8)


def test_init_is_seeded():
    a, b = attn_init(16, k=4, rng=3), attn_init(16, k=4, rng=3)
    np.testing.assert_array_equal(a.w_q, b.w_q)


def test_output_shapes(rng):
    params = attn_init(4, k=2, p=3, rng=rng)
    out = attn_forward(rng.standard_normal((6, 4)), params)
    assert out.f_tilde.shape == (6, 4)
    assert out.attn_map.shape == (6, 2)


def test_batched_shapes(rng):
    params = attn_init(8, k=4, p=2, rng=rng)
    out = attn_forward(rng.standard_normal((3, 7, 8)), params)
    assert out.f_tilde.shape == (3, 7, 8)
    assert out.attn_map.shape == (3, 7, 4)


def test_zero_gate_is_identity(rng):
    params = attn_init(8, k=2, p=4, rng=rng)
    for _ in range(100):
        F = rng.standard_normal((int(rng.integers(1, 40)), 8)) * 10
        np.testing.assert_array_equal(attn_forward(F, params).f_tilde, F)


@pytest.mark.parametrize("length, channels, k, p", [(1, 2, 1, 1), (6, 4, 2, 3), (13, 8, 4, 4), (16, 8, 2, 5)])
def test_matches_naive_loops(rng, length, channels, k, p):
    params = attn_init(channels, k=k, p=p, rng=rng)
    params.beta = 0.7
    F = rng.standard_normal((length, channels))
    out = attn_forward(F, params)
    expected, attn = naive_attention(F, params)
    np.testing.assert_allclose(out.f_tilde, expected, atol=1e-10)
    np.testing.assert_allclose(out.attn_map, attn, atol=1e-10)


def test_rows_sum_to_one(rng):
    params = attn_init(8, k=2, p=4, rng=rng)
    out = attn_forward(rng.standard_normal((33, 8)) * 5, params)
    np.testing.assert_allclose(out.attn_map.sum(axis=-1), 1.0, atol=1e-12)
    assert np.all(out.attn_map >= 0)


def test_rejects_wrong_channel_count(rng):
    params = attn_init(8, k=2, rng=rng)
    with pytest.raises(ShapeMismatch):
        attn_forward(np.zeros((4, 6)), params)


def test_gradients(rng):
    base = attn_init(8, k=2, p=3, rng=rng)

    def op(F, w_q, w_k, w_v, w_o, beta):
        params = AttentionParams(w_q=w_q, w_k=w_k, w_v=w_v, w_o=w_o, beta=float(beta[0]), k=2, p=3)
        out, backward = attn_forward_vjp(F, params)

        def flat_backward(dy):
            dF, grads = backward(dy)
            return dF, grads["w_q"], grads["w_k"], grads["w_v"], grads["w_o"], np.array([grads["beta"]])

        return out.f_tilde, flat_backward

    args = [rng.standard_normal((2, 10, 8)), base.w_q, base.w_k, base.w_v, base.w_o, np.array([0.5])]
    assert grad_check(op, args) < 1e-4


def test_shift_covariance_without_pooling(rng):
    params = attn_init(4, k=2, p=1, rng=rng)
    params.beta = 1.0
    F = rng.standard_normal((12, 4))
    shifted = np.roll(F, 3, axis=0)
    np.testing.assert_allclose(
        attn_forward(shifted, params).f_tilde,
        np.roll(attn_forward(F, params).f_tilde, 3, axis=0),
        atol=1e-12,
    )


def test_shift_covariance_by_pool_multiples(rng):
    params = attn_init(4, k=2, p=2, rng=rng)
    params.beta = 1.0
    F = rng.standard_normal((12, 4))
    shifted = np.roll(F, 2, axis=0)
    np.testing.assert_allclose(
        attn_forward(shifted, params).f_tilde,
        np.roll(attn_forward(F, params).f_tilde, 2, axis=0),
        atol=1e-12,
    )


@pytest.mark.parametrize("layer, time_dim, pooled", [(11, 8, 16), (10, 16, 64), (9, 32, 256), (5, 512, 65536)])
def test_footprint(layer, time_dim, pooled):
    fp = attn_footprint(16384, layer, p=4)
    assert fp.time_dim == time_dim
    assert fp.raw_map_elems == time_dim ** 2
    assert fp.pooled_map_elems == pooled
    assert fp.raw_map_elems == 4 * fp.pooled_map_elems


def test_footprint_grows_fourfold_per_layer_down():
    for layer in range(2, 12):
        upper = attn_footprint(16384, layer)
        lower = attn_footprint(16384, layer - 1)
        assert lower.raw_map_elems == 4 * upper.raw_map_elems


@pytest.mark.parametrize("layer", [0, 12])
def test_footprint_rejects_layers_outside_ladder(layer):
    with pytest.raises(OutOfRangeLayer):
        attn_footprint(16384, layer)


def test_write_attention_csv(tmp_path, rng):
    params = attn_init(4, k=2, p=2, rng=rng)
    attn_map = attn_forward(rng.standard_normal((6, 4)), params).attn_map
    path = tmp_path / "attn.csv"
    assert write_attention_csv(path, 3, attn_map, rows=[0, 5]) == 2
    with path.open() as f:
        rows = list(csv.reader(f))
    assert rows[0] == ["layer", "row_index", "key_index", "weight"]
    assert len(rows) == 1 + 2 * 3
    weights = [float(r[3]) for r in rows[1:] if r[1] == "5"]
    assert abs(sum(weights) - 1.0) < 1e-12


def test_write_attention_csv_rejects_bad_rows(tmp_path, rng):
    with pytest.raises(ValueError):
        write_attention_csv(tmp_path / "a.csv", 3, np.full((4, 2), 0.5), rows=[4])


def test_matches_naive_loops_over_small_grid():
    rng = np.random.default_rng(0)
    for length in range(2, 13):
        for channels in (2, 4, 8):
            for p in (1, 2, 3):
                for k in (1, 2):
                    params = attn_init(channels, k=k, p=p, rng=rng)
                    params.beta = float(rng.uniform(0.1, 1.0))
                    F = rng.standard_normal((length, channels))
                    expected, _ = naive_attention(F, params)
                    np.testing.assert_allclose(attn_forward(F, params).f_tilde, expected, atol=1e-10)


def test_footprint_at_layer_three_has_512_keys():
    fp = attn_footprint(16384, 3, p=4)
    assert fp.time_dim == 2048
    assert fp.pooled_keys == 512

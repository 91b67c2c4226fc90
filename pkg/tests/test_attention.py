from __future__ import annotations

import dataclasses
import math

import numpy as np
import pytest

from streamvit.attention import (AttentionWeights, MemoryPool, memory_push, scaled_dot_attention,
                                 spatial_self_attention, streaming_t2d_attention, streaming_t2d_step,
                                 ty_plane_attention, xt_plane_attention)
from streamvit.errors import DimensionError, EmptyMemoryError, MemoryOrderError
from streamvit.kernels import MacCounter


def brute_attention(q, k, v, heads):
    """Per-head, per-query loop; independent of the library's batching."""
    c = q.shape[-1]
    d = c // heads
    out = np.zeros((q.shape[0], c))
    for h in range(heads):
        sl = slice(h * d, (h + 1) * d)
        for i in range(q.shape[0]):
            logits = np.array([q[i, sl] @ k[j, sl] for j in range(k.shape[0])]) / math.sqrt(d)
            p = np.exp(logits - logits.max())
            p /= p.sum()
            out[i, sl] = p @ v[:, sl]
    return out


def weights(c=8, heads=2, seed=0, gates=1e-4):
    return AttentionWeights.init(np.random.default_rng(seed), c, heads, gates)


def pool_of(*grids, capacity=None):
    pool = MemoryPool(capacity)
    for i, (k, v) in enumerate(grids, 1):
        pool = memory_push(pool, i, k, v)
    return pool


def test_uniform_logits_average_values():
    rng = np.random.default_rng(0)
    v = rng.standard_normal((5, 4))
    out = scaled_dot_attention(np.zeros((3, 4)), rng.standard_normal((5, 4)), v, 2)
    np.testing.assert_allclose(out, np.tile(v.mean(axis=0), (3, 1)), atol=1e-14)


def test_scaled_dot_matches_bruteforce():
    rng = np.random.default_rng(1)
    q, k, v = rng.standard_normal((4, 8)), rng.standard_normal((6, 8)), rng.standard_normal((6, 8))
    np.testing.assert_allclose(scaled_dot_attention(q, k, v, 4), brute_attention(q, k, v, 4), atol=1e-12)


def test_scaled_dot_errors():
    with pytest.raises(EmptyMemoryError):
        scaled_dot_attention(np.zeros((2, 4)), np.zeros((0, 4)), np.zeros((0, 4)), 1)
    with pytest.raises(DimensionError):
        scaled_dot_attention(np.zeros((2, 4)), np.zeros((3, 6)), np.zeros((3, 6)), 1)


def test_window_covering_square_grid_is_global():
    w = weights()
    x = np.random.default_rng(2).standard_normal((4, 4, 8))
    g = spatial_self_attention(x, w, None)
    win = spatial_self_attention(x, w, 4)
    np.testing.assert_allclose(win[0], g[0], atol=1e-12)


def test_window_two_equals_four_separate_attentions():
    w = weights()
    x = np.random.default_rng(3).standard_normal((4, 4, 8))
    o, k_t, v_t = spatial_self_attention(x, w, 2)
    q, k, v = x @ w.w_q, x @ w.w_k, x @ w.w_v
    expect = np.zeros_like(x)
    for by in (0, 2):
        for bx in (0, 2):
            sl = (slice(by, by + 2), slice(bx, bx + 2))
            blk = brute_attention(q[sl].reshape(4, 8), k[sl].reshape(4, 8), v[sl].reshape(4, 8), 2)
            expect[sl] = (blk @ w.w_o).reshape(2, 2, 8)
    np.testing.assert_allclose(o, expect, atol=1e-12)
    # memory keys are always full-grid projections
    np.testing.assert_allclose(k_t, k, atol=1e-14)
    np.testing.assert_allclose(v_t, v, atol=1e-14)


def test_ragged_window_masks_padding():
    # 3x5 grid, window 2: padded keys must get zero weight
    w = weights()
    x = np.random.default_rng(4).standard_normal((3, 5, 8))
    o, _, _ = spatial_self_attention(x, w, 2)
    q, k, v = x @ w.w_q, x @ w.w_k, x @ w.w_v
    sl = (slice(2, 3), slice(4, 5))         # the lone corner token is its own window
    corner = brute_attention(q[sl].reshape(1, 8), k[sl].reshape(1, 8), v[sl].reshape(1, 8), 2) @ w.w_o
    np.testing.assert_allclose(o[2, 4], corner[0], atol=1e-12)


def test_fifo_eviction_keeps_latest_frames():
    g = np.zeros((2, 2, 4))
    pool = MemoryPool(2)
    for t in (1, 2, 3):
        pool = memory_push(pool, t, g + t, g - t)
    assert pool.frame_indices == [2, 3]
    assert pool.keys()[0, 0, 0, 0] == 2


def test_push_copies_and_freezes():
    k = np.ones((2, 2, 4))
    pool = memory_push(MemoryPool(None), 1, k, k)
    k[:] = 5.0
    assert pool.entries[0].k[0, 0, 0] == 1.0
    assert pool.entries[0].detached
    with pytest.raises(ValueError):
        pool.entries[0].k[0, 0, 0] = 3.0


def test_push_order_and_shape_checks():
    g = np.zeros((2, 2, 4))
    pool = memory_push(MemoryPool(None), 2, g, g)
    with pytest.raises(MemoryOrderError):
        memory_push(pool, 2, g, g)
    with pytest.raises(DimensionError):
        memory_push(pool, 3, np.zeros((2, 3, 4)), np.zeros((2, 3, 4)))


def test_xt_single_row_is_global_attention():
    rng = np.random.default_rng(5)
    q, k, v = (rng.standard_normal((1, 6, 8)) for _ in range(3))
    out = xt_plane_attention(q, pool_of((k, v)), 2)
    np.testing.assert_allclose(out[0], brute_attention(q[0], k[0], v[0], 2), atol=1e-12)


def test_ty_single_column_is_global_attention():
    rng = np.random.default_rng(6)
    q, k, v = (rng.standard_normal((5, 1, 8)) for _ in range(3))
    out = ty_plane_attention(q, pool_of((k, v)), 2)
    np.testing.assert_allclose(out[:, 0], brute_attention(q[:, 0], k[:, 0], v[:, 0], 2), atol=1e-12)


def test_duplicate_frames_leave_output_unchanged():
    rng = np.random.default_rng(7)
    q, k, v = (rng.standard_normal((3, 4, 8)) for _ in range(3))
    one = xt_plane_attention(q, pool_of((k, v)), 2)
    two = xt_plane_attention(q, pool_of((k, v), (k, v)), 2)
    np.testing.assert_allclose(two, one, atol=1e-12)


def test_xt_matches_per_row_bruteforce():
    rng = np.random.default_rng(8)
    q = rng.standard_normal((3, 4, 8))
    frames = [(rng.standard_normal((3, 4, 8)), rng.standard_normal((3, 4, 8))) for _ in range(2)]
    out = xt_plane_attention(q, pool_of(*frames), 2)
    for y in range(3):
        keys = np.concatenate([k[y] for k, _ in frames])
        vals = np.concatenate([v[y] for _, v in frames])
        np.testing.assert_allclose(out[y], brute_attention(q[y], keys, vals, 2), atol=1e-12)


def test_ty_is_transpose_dual_of_xt():
    rng = np.random.default_rng(9)
    q = rng.standard_normal((3, 5, 8))
    frames = [(rng.standard_normal((3, 5, 8)), rng.standard_normal((3, 5, 8))) for _ in range(3)]
    ty = ty_plane_attention(q, pool_of(*frames), 4)
    tr = [(k.transpose(1, 0, 2), v.transpose(1, 0, 2)) for k, v in frames]
    xt = xt_plane_attention(q.transpose(1, 0, 2), pool_of(*tr), 4)
    np.testing.assert_allclose(ty, xt.transpose(1, 0, 2), atol=1e-12)


def test_zero_gates_give_spatial_output_exactly():
    w = weights(gates=0.0)
    rng = np.random.default_rng(10)
    pool = pool_of((rng.standard_normal((4, 4, 8)), rng.standard_normal((4, 4, 8))))
    x = rng.standard_normal((4, 4, 8))
    step = streaming_t2d_step(x, pool, w)
    np.testing.assert_array_equal(step.out, step.o_t)


def test_first_frame_fusion_bound():
    w = weights()
    x = np.random.default_rng(11).standard_normal((4, 4, 8))
    step = streaming_t2d_step(x, MemoryPool(None), w, 1)
    bound = 1e-4 * (np.abs(step.xt).max() + np.abs(step.ty).max())
    assert np.abs(step.out - step.o_t).max() <= bound * (1 + 1e-12)
    assert len(step.pool) == 1 and step.pool.frame_indices == [1]


def test_step_pushes_before_attending():
    # the current frame is in memory, so a fresh pool still yields a temporal term
    w = weights(gates=1.0)
    x = np.random.default_rng(12).standard_normal((2, 3, 8))
    out, pool = streaming_t2d_attention(x, MemoryPool(3), w, 1)
    o_t = spatial_self_attention(x, w)[0]
    assert not np.allclose(out, o_t)
    assert pool.frame_indices == [1]


def test_cross_attention_mac_count():
    nh, nw, c = 3, 5, 8
    w = weights(c)
    rng = np.random.default_rng(13)
    pool = pool_of(*[(rng.standard_normal((nh, nw, c)), rng.standard_normal((nh, nw, c))) for _ in range(2)])
    counter = MacCounter()
    streaming_t2d_step(rng.standard_normal((nh, nw, c)), pool, w, 3, counter=counter)
    t_mem = 3
    assert counter.by_stage["cross_attention"] == 2 * (nh * nw * nw + nw * nh * nh) * t_mem * c
    assert counter.by_stage["temporal_projection"] == 3 * nh * nw * c * c


def test_channel_permutation_equivariance():
    c = 8
    w = weights(c, heads=1, gates=0.7)
    rng = np.random.default_rng(14)
    perm = rng.permutation(c)
    p = np.eye(c)[:, perm]

    def permute(wt):
        mats = {n: p.T @ getattr(wt, n) @ p for n in ("w_q", "w_k", "w_v", "w_o", "wt_q", "wt_o_xt", "wt_o_ty")}
        return dataclasses.replace(wt, **mats, alpha_xt=wt.alpha_xt[perm], alpha_ty=wt.alpha_ty[perm])

    frames = [rng.standard_normal((3, 4, c)) for _ in range(3)]
    pool, pool_p = MemoryPool(None), MemoryPool(None)
    wp = permute(w)
    for t, x in enumerate(frames, 1):
        out, pool = streaming_t2d_attention(x, pool, w, t)
        out_p, pool_p = streaming_t2d_attention(x[..., perm], pool_p, wp, t)
        np.testing.assert_allclose(out_p, out[..., perm], atol=1e-12)


def test_time_embedding_offsets_keys():
    c = 8
    rng = np.random.default_rng(15)
    w = AttentionWeights.init(rng, c, 2, 1.0, time_embed_len=3)
    k, v = rng.standard_normal((2, 2, c)), rng.standard_normal((2, 2, c))
    pool = pool_of((k, v), (k, v))
    q = rng.standard_normal((2, 2, c))
    got = xt_plane_attention(q, pool, 2, time_embed=w.time_embed, frame_index=2)
    keys = np.concatenate([k[0] + w.time_embed[1], k[0] + w.time_embed[0]])
    np.testing.assert_allclose(got[0], brute_attention(q[0], keys, np.concatenate([v[0], v[0]]), 2), atol=1e-12)

"""Spatial self-attention, the key/value memory pool and streaming T2D attention.

Token grids are arrays of shape ``[N_h, N_w, C]`` (row ``y``, column ``x``,
channel). The two temporal planes are

* XT: a fixed row ``y``; its ``N_w`` queries attend over that row's tokens in
  every memory frame (``T_mem * N_w`` keys);
* TY: a fixed column ``x``; its ``N_h`` queries attend over that column's
  tokens in every memory frame (``T_mem * N_h`` keys).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ConfigError, DimensionError, EmptyMemoryError, MemoryOrderError
from .kernels import MacCounter, counting_stage, matmul, softmax_rows


@dataclass
class AttentionWeights:
    """Per-layer parameters of one streaming T2D attention block.

    ``time_embed`` is the optional per-offset key embedding (row ``d`` is added
    to keys stored ``d`` frames ago); ``None`` disables it.
    """

    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    w_o: np.ndarray
    wt_q: np.ndarray
    wt_o_xt: np.ndarray
    wt_o_ty: np.ndarray
    alpha_xt: np.ndarray
    alpha_ty: np.ndarray
    heads: int
    time_embed: Optional[np.ndarray] = None

    def __post_init__(self):
        c = self.w_q.shape[0]
        for name in ("w_q", "w_k", "w_v", "w_o", "wt_q", "wt_o_xt", "wt_o_ty"):
            if getattr(self, name).shape != (c, c):
                raise DimensionError(f"{name} must be {c}x{c}, got {getattr(self, name).shape}")
        for name in ("alpha_xt", "alpha_ty"):
            if getattr(self, name).shape != (c,):
                raise DimensionError(f"{name} must have shape ({c},)")
        if self.heads < 1 or c % self.heads:
            raise ConfigError(f"heads={self.heads} must divide channels={c}")

    @property
    def channels(self) -> int:
        return self.w_q.shape[0]

    @classmethod
    def init(
        cls,
        rng: np.random.Generator,
        channels: int,
        heads: int,
        fusion_init: float = 1e-4,
        dtype=np.float64,
        time_embed_len: Optional[int] = None,
    ) -> "AttentionWeights":
        a = math.sqrt(1.0 / channels)

        def mat():
            return rng.uniform(-a, a, size=(channels, channels)).astype(dtype)

        mats = {name: mat() for name in ("w_q", "w_k", "w_v", "w_o", "wt_q", "wt_o_xt", "wt_o_ty")}
        time_embed = None
        if time_embed_len is not None:
            time_embed = rng.uniform(-0.02, 0.02, size=(time_embed_len, channels)).astype(dtype)
        return cls(
            **mats,
            alpha_xt=np.full(channels, fusion_init, dtype=dtype),
            alpha_ty=np.full(channels, fusion_init, dtype=dtype),
            heads=heads,
            time_embed=time_embed,
        )

    def with_gates(self, value: float) -> "AttentionWeights":
        """Copy with both fusion gates set to a constant."""
        return AttentionWeights(
            self.w_q, self.w_k, self.w_v, self.w_o, self.wt_q, self.wt_o_xt, self.wt_o_ty,
            np.full_like(self.alpha_xt, value), np.full_like(self.alpha_ty, value),
            self.heads, self.time_embed,
        )


@dataclass(frozen=True)
class MemoryEntry:
    frame_index: int
    k: np.ndarray
    v: np.ndarray
    # values in the pool are sg(k), sg(v): gradients never flow back through them
    detached: bool = True


@dataclass(frozen=True)
class MemoryPool:
    """Immutable FIFO of detached key/value grids, oldest first.

    ``capacity`` of ``None`` means unbounded. Pushing returns a new pool that
    shares the surviving entries with the old one.
    """

    capacity: Optional[int] = None
    entries: tuple[MemoryEntry, ...] = field(default=())

    def __post_init__(self):
        if self.capacity is not None and self.capacity < 1:
            raise ConfigError(f"memory capacity must be >= 1 or unbounded, got {self.capacity}")

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def frame_indices(self) -> list[int]:
        return [e.frame_index for e in self.entries]

    def keys(self) -> np.ndarray:
        """Stacked keys ``[T_mem, N_h, N_w, C]``."""
        return np.stack([e.k for e in self.entries])

    def values(self) -> np.ndarray:
        return np.stack([e.v for e in self.entries])


def _frozen_copy(a: np.ndarray) -> np.ndarray:
    out = np.array(a, copy=True)
    out.setflags(write=False)
    return out


def memory_push(pool: MemoryPool, frame_index: int, k_t: np.ndarray, v_t: np.ndarray) -> MemoryPool:
    if pool.entries and frame_index <= pool.entries[-1].frame_index:
        raise MemoryOrderError(
            f"frame index {frame_index} does not follow last stored index {pool.entries[-1].frame_index}"
        )
    if k_t.shape != v_t.shape or k_t.ndim != 3:
        raise DimensionError(f"memory entries must be matching [N_h,N_w,C] grids, got {k_t.shape}, {v_t.shape}")
    if pool.entries and pool.entries[0].k.shape != k_t.shape:
        raise DimensionError(f"grid {k_t.shape} does not match pool grid {pool.entries[0].k.shape}")
    entries = pool.entries + (MemoryEntry(frame_index, _frozen_copy(k_t), _frozen_copy(v_t)),)
    if pool.capacity is not None and len(entries) > pool.capacity:
        entries = entries[len(entries) - pool.capacity :]
    return MemoryPool(pool.capacity, entries)


def _split_heads(x: np.ndarray, heads: int) -> np.ndarray:
    # [..., n, C] -> [..., heads, n, d]
    *lead, n, c = x.shape
    return np.moveaxis(x.reshape(*lead, n, heads, c // heads), -2, -3)


def _merge_heads(x: np.ndarray) -> np.ndarray:
    # [..., heads, n, d] -> [..., n, C]
    *lead, h, n, d = x.shape
    return np.moveaxis(x, -3, -2).reshape(*lead, n, h * d)


def scaled_dot_attention(
    q: np.ndarray,
    k: np.ndarray,
    v: np.ndarray,
    heads: int,
    counter: Optional[MacCounter] = None,
    key_bias: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Multi-head softmax attention over the last two axes.

    ``q`` is ``[..., n_q, C]`` and ``k``/``v`` are ``[..., n_k, C]`` with equal
    leading axes. ``key_bias`` (``[..., n_k]``, 0 or ``-inf``) masks keys.
    """
    if k.shape[-2] == 0:
        raise EmptyMemoryError("attention over an empty key set")
    c = q.shape[-1]
    if heads < 1 or c % heads:
        raise ConfigError(f"heads={heads} must divide channels={c}")
    if k.shape != v.shape or k.shape[-1] != c or k.shape[:-2] != q.shape[:-2]:
        raise DimensionError(f"attention shapes q={q.shape} k={k.shape} v={v.shape}")
    scale = 1.0 / math.sqrt(c // heads)
    qh, kh, vh = _split_heads(q, heads), _split_heads(k, heads), _split_heads(v, heads)
    logits = matmul(qh, np.swapaxes(kh, -1, -2), counter) * scale
    if key_bias is not None:
        logits = logits + key_bias[..., None, None, :]
    return _merge_heads(matmul(softmax_rows(logits), vh, counter))


def window_partition(grid: np.ndarray, window: int) -> tuple[np.ndarray, np.ndarray]:
    """Zero-pad ``[H,W,C]`` to window multiples and cut into ``[n_win, window*window, C]``.

    Also returns the key bias marking padded positions with ``-inf``.
    """
    h, w, c = grid.shape
    hp, wp = -(-h // window) * window, -(-w // window) * window
    padded = np.zeros((hp, wp, c), dtype=grid.dtype)
    padded[:h, :w] = grid
    valid = np.zeros((hp, wp), dtype=bool)
    valid[:h, :w] = True
    nh, nw = hp // window, wp // window
    parts = padded.reshape(nh, window, nw, window, c).transpose(0, 2, 1, 3, 4).reshape(nh * nw, window * window, c)
    mask = valid.reshape(nh, window, nw, window).transpose(0, 2, 1, 3).reshape(nh * nw, window * window)
    bias = np.where(mask, 0.0, -np.inf).astype(grid.dtype)
    return parts, bias


def window_merge(parts: np.ndarray, h: int, w: int, window: int) -> np.ndarray:
    c = parts.shape[-1]
    hp, wp = -(-h // window) * window, -(-w // window) * window
    nh, nw = hp // window, wp // window
    grid = parts.reshape(nh, nw, window, window, c).transpose(0, 2, 1, 3, 4).reshape(hp, wp, c)
    return grid[:h, :w]


def spatial_self_attention(
    x_t: np.ndarray,
    w: AttentionWeights,
    window: Optional[int] = None,
    counter: Optional[MacCounter] = None,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Within-frame attention. Returns ``(o_t, k_t, v_t)`` as ``[N_h,N_w,C]`` grids.

    ``o_t`` already includes the output projection. With ``window`` set, the
    grid is zero-padded to a window multiple, attention runs inside each
    ``window x window`` block (padded keys masked out) and the result is
    cropped. ``k_t``/``v_t`` always cover the full, unpadded grid.
    """
    if window is not None and window <= 0:
        raise ConfigError(f"window must be positive, got {window}")
    nh, nw, c = x_t.shape
    flat = x_t.reshape(nh * nw, c)
    with counting_stage(counter, "spatial_attention"):
        q = matmul(flat, w.w_q, counter)
        k = matmul(flat, w.w_k, counter)
        v = matmul(flat, w.w_v, counter)
        if window is None:
            o = scaled_dot_attention(q, k, v, w.heads, counter)
        else:
            qw, bias = window_partition(q.reshape(nh, nw, c), window)
            kw, _ = window_partition(k.reshape(nh, nw, c), window)
            vw, _ = window_partition(v.reshape(nh, nw, c), window)
            ow = scaled_dot_attention(qw, kw, vw, w.heads, counter, key_bias=bias)
            o = window_merge(ow, nh, nw, window).reshape(nh * nw, c)
        o = matmul(o, w.w_o, counter)
    return o.reshape(nh, nw, c), k.reshape(nh, nw, c), v.reshape(nh, nw, c)


def _memory_kv(
    q_grid: np.ndarray, pool: MemoryPool, time_embed: Optional[np.ndarray], frame_index: Optional[int]
) -> tuple[np.ndarray, np.ndarray]:
    if len(pool) == 0:
        raise EmptyMemoryError("plane attention needs at least one memory entry")
    keys, values = pool.keys(), pool.values()
    if keys.shape[1:] != q_grid.shape:
        raise DimensionError(f"query grid {q_grid.shape} does not match memory grid {keys.shape[1:]}")
    if time_embed is not None:
        t = pool.entries[-1].frame_index if frame_index is None else frame_index
        offsets = np.array([t - e.frame_index for e in pool.entries])
        if offsets.max() >= time_embed.shape[0]:
            raise ConfigError(f"memory offset {offsets.max()} exceeds time embedding length {time_embed.shape[0]}")
        keys = keys + time_embed[offsets][:, None, None, :]
    return keys, values


def xt_plane_attention(
    q_grid: np.ndarray,
    pool: MemoryPool,
    heads: int,
    counter: Optional[MacCounter] = None,
    time_embed: Optional[np.ndarray] = None,
    frame_index: Optional[int] = None,
) -> np.ndarray:
    """Each row's queries attend over that row in every memory frame."""
    keys, values = _memory_kv(q_grid, pool, time_embed, frame_index)
    t, nh, nw, c = keys.shape
    # [T, N_h, N_w, C] -> [N_h, T*N_w, C]
    k_rows = keys.transpose(1, 0, 2, 3).reshape(nh, t * nw, c)
    v_rows = values.transpose(1, 0, 2, 3).reshape(nh, t * nw, c)
    return scaled_dot_attention(q_grid, k_rows, v_rows, heads, counter)


def ty_plane_attention(
    q_grid: np.ndarray,
    pool: MemoryPool,
    heads: int,
    counter: Optional[MacCounter] = None,
    time_embed: Optional[np.ndarray] = None,
    frame_index: Optional[int] = None,
) -> np.ndarray:
    """Each column's queries attend over that column in every memory frame."""
    keys, values = _memory_kv(q_grid, pool, time_embed, frame_index)
    t, nh, nw, c = keys.shape
    # [T, N_h, N_w, C] -> [N_w, T*N_h, C]
    k_cols = keys.transpose(2, 0, 1, 3).reshape(nw, t * nh, c)
    v_cols = values.transpose(2, 0, 1, 3).reshape(nw, t * nh, c)
    out = scaled_dot_attention(q_grid.transpose(1, 0, 2), k_cols, v_cols, heads, counter)
    return out.transpose(1, 0, 2)


@dataclass
class StreamingOutput:
    """Everything one streaming T2D step produces; ``out`` is the fused result."""

    out: np.ndarray
    pool: MemoryPool
    o_t: np.ndarray
    xt: np.ndarray
    ty: np.ndarray


def streaming_t2d_step(
    x_t: np.ndarray,
    pool: MemoryPool,
    w: AttentionWeights,
    frame_index: Optional[int] = None,
    window: Optional[int] = None,
    counter: Optional[MacCounter] = None,
    memory_kv: Optional[tuple[np.ndarray, np.ndarray]] = None,
) -> StreamingOutput:
    """One frame of streaming T2D attention, returning branch outputs too.

    ``memory_kv`` replaces the ``(k_t, v_t)`` pushed into memory; it exists so
    finite-difference checks can hold the stored entry fixed, which is what
    stop-gradient means for a perturbation.
    """
    if frame_index is None:
        frame_index = pool.entries[-1].frame_index + 1 if pool.entries else 1
    o_t, k_t, v_t = spatial_self_attention(x_t, w, window, counter)
    if memory_kv is not None:
        k_t, v_t = memory_kv
    new_pool = memory_push(pool, frame_index, k_t, v_t)
    nh, nw, c = o_t.shape
    with counting_stage(counter, "temporal_projection"):
        q_tilde = matmul(o_t.reshape(nh * nw, c), w.wt_q, counter).reshape(nh, nw, c)
    with counting_stage(counter, "cross_attention"):
        o_xt = xt_plane_attention(q_tilde, new_pool, w.heads, counter, w.time_embed, frame_index)
        o_ty = ty_plane_attention(q_tilde, new_pool, w.heads, counter, w.time_embed, frame_index)
    with counting_stage(counter, "temporal_projection"):
        b_xt = matmul(o_xt.reshape(nh * nw, c), w.wt_o_xt, counter).reshape(nh, nw, c)
        b_ty = matmul(o_ty.reshape(nh * nw, c), w.wt_o_ty, counter).reshape(nh, nw, c)
    out = o_t + w.alpha_xt * b_xt + w.alpha_ty * b_ty
    return StreamingOutput(out, new_pool, o_t, b_xt, b_ty)


def streaming_t2d_attention(
    x_t: np.ndarray,
    pool: MemoryPool,
    w: AttentionWeights,
    frame_index: Optional[int] = None,
    window: Optional[int] = None,
    counter: Optional[MacCounter] = None,
) -> tuple[np.ndarray, MemoryPool]:
    """Spatial attention fused with XT/TY cross-attention over the memory pool.

    The current frame's keys/values are pushed before the temporal branch runs,
    so frame ``t`` attends over memory frames ``t-M+1 .. t``. Returns the fused
    grid and the advanced pool.
    """
    step = streaming_t2d_step(x_t, pool, w, frame_index, window, counter)
    return step.out, step.pool

"""Clip-level reference computation of the encoder.

Every frame of a clip is processed at once and the temporal planes attend
over all frames admitted by a :class:`TemporalMask`. Under a causal mask this
must reproduce the streaming encoder; under a bidirectional mask it is the
clip-based baseline. Only :mod:`streamvit.kernels` is shared with the
streaming path: attention, patch embedding, propagation blocks and the
adaptor are re-derived here so agreement is an independent check.

No windowing: spatial attention is always global, so configurations whose
window is smaller than the token grid are rejected.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .config import ModelConfig
from .encoder import EncoderWeights, FrameFeatures
from .errors import ConfigError, DimensionError
from .kernels import MacCounter, conv2d, conv2d_transpose, counting_stage, gelu, layer_norm, matmul, softmax_rows


@dataclass(frozen=True)
class TemporalMask:
    """Which key frames each query frame may see.

    ``causal``: frame ``t`` sees ``s`` iff ``t - M < s <= t`` (``M=None`` is
    unbounded). ``bidirectional``: every frame sees every frame.
    """

    mode: str = "causal"
    capacity: Optional[int] = None

    def __post_init__(self):
        if self.mode not in ("causal", "bidirectional"):
            raise ConfigError(f"unknown mask mode {self.mode!r}")

    def allowed(self, t: int, s: int) -> bool:
        if self.mode == "bidirectional":
            return True
        return s <= t and (self.capacity is None or s > t - self.capacity)

    def matrix(self, n_frames: int) -> np.ndarray:
        """Boolean ``[T, T]`` admission matrix indexed ``[query, key]`` (0-based)."""
        return np.array([[self.allowed(t, s) for s in range(n_frames)] for t in range(n_frames)])


def _attend(q, k, v, heads, counter, bias=None):
    # q [B, nq, C], k/v [B, nk, C], bias [nk] of 0 / -inf
    b, nq, c = q.shape
    nk = k.shape[1]
    d = c // heads
    qh = q.reshape(b, nq, heads, d).transpose(0, 2, 1, 3)
    kt = k.reshape(b, nk, heads, d).transpose(0, 2, 3, 1)
    vh = v.reshape(b, nk, heads, d).transpose(0, 2, 1, 3)
    logits = matmul(qh, kt, counter) * (1.0 / math.sqrt(d))
    if bias is not None:
        logits = logits + bias
    out = matmul(softmax_rows(logits), vh, counter)
    return out.transpose(0, 2, 1, 3).reshape(b, nq, c)


def _patches(frame: np.ndarray, p: int, nh: int, nw: int) -> np.ndarray:
    rows = []
    for y in range(nh):
        for x in range(nw):
            rows.append(frame[:, y * p:(y + 1) * p, x * p:(x + 1) * p].reshape(-1))
    return np.stack(rows)


def _key_bias(mask_row: np.ndarray, per_frame: int, dtype) -> np.ndarray:
    return np.repeat(np.where(mask_row, 0.0, -np.inf), per_frame).astype(dtype)


def t2d_cross_attention(q_grid, keys, values, heads, counter=None, bias_frames=None):
    """XT and TY plane attention of one query grid over ``keys[T, N_h, N_w, C]``.

    ``bias_frames`` (bool ``[T]``) admits key frames; default admits all.
    Returns ``(o_xt, o_ty)`` grids.
    """
    t, nh, nw, c = keys.shape
    if q_grid.shape != (nh, nw, c):
        raise DimensionError(f"query grid {q_grid.shape} vs keys {keys.shape}")
    admit = np.ones(t, bool) if bias_frames is None else bias_frames
    k_rows = keys.transpose(1, 0, 2, 3).reshape(nh, t * nw, c)
    v_rows = values.transpose(1, 0, 2, 3).reshape(nh, t * nw, c)
    o_xt = _attend(q_grid, k_rows, v_rows, heads, counter, _key_bias(admit, nw, q_grid.dtype))
    k_cols = keys.transpose(2, 0, 1, 3).reshape(nw, t * nh, c)
    v_cols = values.transpose(2, 0, 1, 3).reshape(nw, t * nh, c)
    o_ty = _attend(q_grid.transpose(1, 0, 2), k_cols, v_cols, heads, counter, _key_bias(admit, nh, q_grid.dtype))
    return o_xt, o_ty.transpose(1, 0, 2)


def joint_cross_attention(q_grid, keys, values, heads, counter=None, bias_frames=None):
    """Unrestricted cross-attention: every query token sees every admitted memory token."""
    t, nh, nw, c = keys.shape
    admit = np.ones(t, bool) if bias_frames is None else bias_frames
    out = _attend(q_grid.reshape(1, nh * nw, c), keys.reshape(1, t * nh * nw, c),
                  values.reshape(1, t * nh * nw, c), heads, counter, _key_bias(admit, nh * nw, q_grid.dtype))
    return out.reshape(nh, nw, c)


def _channel_ln(f, g, b, eps):
    return layer_norm(f.transpose(1, 2, 0), g, b, eps).transpose(2, 0, 1)


def _forward(frames, config: ModelConfig, weights: EncoderWeights, mask: TemporalMask,
             counter: Optional[MacCounter], temporal: str) -> list[FrameFeatures]:
    if len(frames) == 0:
        raise ValueError("need at least one frame")
    nh, nw = config.grid
    window = config.effective_window
    if window is not None and window < max(nh, nw):
        raise ConfigError("the dense oracle runs global spatial attention; window must cover the grid")
    c, p, dt = config.channels, config.patch, config.np_dtype
    n = nh * nw
    t_len = len(frames)
    admit = mask.matrix(t_len)
    frames = [np.asarray(f, dtype=dt) for f in frames]
    for f in frames:
        if f.shape != (3, config.image_h, config.image_w):
            raise DimensionError(f"frame shape {f.shape} does not match config")

    with counting_stage(counter, "patch_embed"):
        patches = np.stack([_patches(f, p, nh, nw) for f in frames])            # [T, N, 3p^2]
        z = matmul(patches.reshape(t_len * n, -1), weights.patch_w, counter).reshape(t_len, nh, nw, c)
    z = z + weights.pos_embed

    for li, lp in enumerate(weights.layers):
        aw = lp.attn
        a = layer_norm(z, lp.ln1_g, lp.ln1_b, config.ln_eps)
        with counting_stage(counter, "spatial_attention"):
            flat = a.reshape(t_len * n, c)
            q = matmul(flat, aw.w_q, counter).reshape(t_len, n, c)
            k = matmul(flat, aw.w_k, counter).reshape(t_len, n, c)
            v = matmul(flat, aw.w_v, counter).reshape(t_len, n, c)
            o = _attend(q, k, v, aw.heads, counter)
            o = matmul(o.reshape(t_len * n, c), aw.w_o, counter)
        with counting_stage(counter, "temporal_projection"):
            qt = matmul(o, aw.wt_q, counter).reshape(t_len, nh, nw, c)
        keys = k.reshape(t_len, nh, nw, c)
        values = v.reshape(t_len, nh, nw, c)
        o_xt = np.empty_like(qt)
        o_ty = np.empty_like(qt)
        with counting_stage(counter, "cross_attention"):
            for t in range(t_len):
                kt = keys
                if aw.time_embed is not None:
                    offsets = np.arange(t_len)
                    offsets = np.where(admit[t], t - offsets, 0)
                    kt = keys + aw.time_embed[offsets][:, None, None, :]
                if temporal == "joint":
                    o_xt[t] = o_ty[t] = joint_cross_attention(qt[t], kt, values, aw.heads, counter, admit[t])
                else:
                    o_xt[t], o_ty[t] = t2d_cross_attention(qt[t], kt, values, aw.heads, counter, admit[t])
        with counting_stage(counter, "temporal_projection"):
            b_xt = matmul(o_xt.reshape(t_len * n, c), aw.wt_o_xt, counter)
            b_ty = matmul(o_ty.reshape(t_len * n, c), aw.wt_o_ty, counter)
        fused = o + aw.alpha_xt * b_xt + aw.alpha_ty * b_ty
        y = fused.reshape(t_len, nh, nw, c) + z
        with counting_stage(counter, "mlp"):
            hcur = layer_norm(y, lp.ln2_g, lp.ln2_b, config.ln_eps).reshape(t_len * n, c)
            hcur = gelu(matmul(hcur, lp.w1, counter) + lp.b1)
            m = matmul(hcur, lp.w2, counter) + lp.b2
        z = m.reshape(t_len, nh, nw, c) + y
        if config.mode == "frame" and (li + 1) % config.layers_per_stage == 0:
            rb = weights.resblocks[(li + 1) // config.layers_per_stage - 1]
            with counting_stage(counter, "resnet"):
                blocks = []
                for t in range(t_len):
                    f = z[t].transpose(2, 0, 1)
                    h1 = conv2d(_channel_ln(f, rb.norm1_g, rb.norm1_b, config.ln_eps), rb.conv1, 1, 1, counter)
                    h1 = gelu(_channel_ln(h1, rb.norm2_g, rb.norm2_b, config.ln_eps))
                    blocks.append((f + conv2d(h1, rb.conv2, 1, 1, counter)).transpose(1, 2, 0))
                z = np.stack(blocks)

    results = []
    for t in range(t_len):
        pyramid = None
        if config.mode == "frame":
            f16 = np.ascontiguousarray(z[t].transpose(2, 0, 1))
            pyramid = {}
            with counting_stage(counter, "adaptor"):
                for level in weights.adaptor:
                    if level.kind == "up":
                        pyramid[level.stride] = conv2d_transpose(f16, level.kernel, level.factor, counter)
                    else:
                        pyramid[level.stride] = conv2d(f16, level.kernel, level.factor, 0, counter)
        results.append(FrameFeatures(np.ascontiguousarray(z[t]), pyramid))
    return results


def clip_t2d_forward(frames: Sequence[np.ndarray], config: ModelConfig, weights: EncoderWeights,
                     mask: TemporalMask, counter: Optional[MacCounter] = None) -> list[FrameFeatures]:
    """All frames jointly, T2D planes restricted to mask-admitted key frames."""
    return _forward(frames, config, weights, mask, counter, "t2d")


def full_joint_attention(frames: Sequence[np.ndarray], config: ModelConfig, weights: EncoderWeights,
                         counter: Optional[MacCounter] = None,
                         mask: Optional[TemporalMask] = None) -> list[np.ndarray]:
    """Same stack with plane attention replaced by joint spatiotemporal cross-attention.

    A cost reference only; the joint output feeds both temporal branches so a
    1x1 grid reproduces the T2D result.
    """
    mask = mask or TemporalMask("causal", config.memory_capacity)
    return [f.tokens for f in _forward(frames, config, weights, mask, counter, "joint")]

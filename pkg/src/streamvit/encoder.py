"""Temporal-aware spatial encoder: patch embedding, streaming Transformer
layers grouped into stages, per-stage ResNet propagation blocks and the
resolution adaptor that turns the stride-16 map into a four-level pyramid.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .attention import (
    AttentionWeights,
    MemoryPool,
    scaled_dot_attention,
    streaming_t2d_attention,
    window_merge,
    window_partition,
)
from .config import PYRAMID_STRIDES, ModelConfig
from .errors import DimensionError
from .kernels import MacCounter, conv2d, conv2d_transpose, counting_stage, gelu, layer_norm, matmul


def _uniform(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    a = math.sqrt(1.0 / fan_in)
    return rng.uniform(-a, a, size=shape).astype(dtype)


@dataclass
class LayerParams:
    attn: AttentionWeights
    ln1_g: np.ndarray
    ln1_b: np.ndarray
    ln2_g: np.ndarray
    ln2_b: np.ndarray
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray


@dataclass
class ResBlockParams:
    norm1_g: np.ndarray
    norm1_b: np.ndarray
    conv1: np.ndarray
    norm2_g: np.ndarray
    norm2_b: np.ndarray
    conv2: np.ndarray


@dataclass
class AdaptorLevel:
    """One pyramid level: ``kind`` is ``"up"`` (transposed conv), ``"conv"`` (1x1)
    or ``"down"`` (stride-``factor`` conv with a ``factor x factor`` kernel)."""

    stride: int
    kind: str
    factor: int
    kernel: np.ndarray


@dataclass
class EncoderWeights:
    patch_w: np.ndarray            # [3*p*p, C]
    pos_embed: np.ndarray          # [N_h, N_w, C]
    layers: list[LayerParams]
    resblocks: list[ResBlockParams]
    adaptor: list[AdaptorLevel]

    def with_gates(self, value: float) -> "EncoderWeights":
        layers = [dataclasses.replace(lp, attn=lp.attn.with_gates(value)) for lp in self.layers]
        return EncoderWeights(self.patch_w, self.pos_embed, layers, self.resblocks, self.adaptor)


def adaptor_plan(config: ModelConfig) -> list[tuple[int, str, int]]:
    """``(stride, kind, factor)`` per level, relative to the token grid."""
    plan = []
    for s in PYRAMID_STRIDES:
        if config.patch > s:
            plan.append((s, "up", config.patch // s))
        elif config.patch == s:
            plan.append((s, "conv", 1))
        else:
            plan.append((s, "down", s // config.patch))
    return plan


def init_encoder_weights(config: ModelConfig) -> EncoderWeights:
    """Seeded deterministic initialisation (uniform +-sqrt(1/fan_in))."""
    rng = np.random.default_rng([config.seed, 0])
    dt = config.np_dtype
    c, p = config.channels, config.patch
    nh, nw = config.grid
    patch_w = _uniform(rng, (3 * p * p, c), 3 * p * p, dt)
    pos_embed = rng.uniform(-0.02, 0.02, size=(nh, nw, c)).astype(dt)
    layers = []
    for _ in range(config.layers):
        attn = AttentionWeights.init(
            rng, c, config.heads, config.fusion_init, dt,
            time_embed_len=config.memory_capacity if config.temporal_pos_embed else None,
        )
        layers.append(LayerParams(
            attn=attn,
            ln1_g=np.ones(c, dt), ln1_b=np.zeros(c, dt),
            ln2_g=np.ones(c, dt), ln2_b=np.zeros(c, dt),
            w1=_uniform(rng, (c, config.hidden), c, dt), b1=np.zeros(config.hidden, dt),
            w2=_uniform(rng, (config.hidden, c), config.hidden, dt), b2=np.zeros(c, dt),
        ))
    resblocks, adaptor = [], []
    if config.mode == "frame":
        for _ in range(config.stages):
            resblocks.append(ResBlockParams(
                norm1_g=np.ones(c, dt), norm1_b=np.zeros(c, dt),
                conv1=_uniform(rng, (c, c, 3, 3), 9 * c, dt),
                norm2_g=np.ones(c, dt), norm2_b=np.zeros(c, dt),
                conv2=_uniform(rng, (c, c, 3, 3), 9 * c, dt),
            ))
        for (stride, kind, factor), c_out in zip(adaptor_plan(config), config.level_channels):
            if kind == "up":
                k = 2 * factor
                kernel = _uniform(rng, (c, c_out, k, k), c * k * k, dt)
            else:
                kernel = _uniform(rng, (c_out, c, factor, factor), c * factor * factor, dt)
            adaptor.append(AdaptorLevel(stride, kind, factor, kernel))
    return EncoderWeights(patch_w, pos_embed, layers, resblocks, adaptor)


@dataclass
class FrameFeatures:
    tokens: np.ndarray                           # [N_h, N_w, C], final layer
    pyramid: Optional[dict[int, np.ndarray]] = None  # stride -> [C_s, H/s, W/s]


@dataclass
class EncoderState:
    """Weights plus the per-layer memory pools of one video stream.

    Not thread-safe: one state per sequence. ``skip_memory_push`` is a fault
    hook for the verification suites (the pools are never advanced).
    """

    config: ModelConfig
    weights: EncoderWeights
    pools: list[MemoryPool] = field(default_factory=list)
    next_frame_index: int = 1
    skip_memory_push: bool = False

    def __post_init__(self):
        if not self.pools:
            self.pools = [MemoryPool(self.config.memory_capacity) for _ in range(self.config.layers)]

    @classmethod
    def create(cls, config: ModelConfig, weights: Optional[EncoderWeights] = None) -> "EncoderState":
        return cls(config, weights if weights is not None else init_encoder_weights(config))

    def reset(self) -> None:
        self.pools = [MemoryPool(self.config.memory_capacity) for _ in range(self.config.layers)]
        self.next_frame_index = 1


def patch_embed(frame: np.ndarray, config: ModelConfig, weights: EncoderWeights,
                counter: Optional[MacCounter] = None) -> np.ndarray:
    """``Z0 = X_p W_e + e``: flatten non-overlapping patches (channel-major), project, add positions."""
    if frame.shape != (3, config.image_h, config.image_w):
        raise DimensionError(f"frame shape {frame.shape} != (3, {config.image_h}, {config.image_w})")
    p = config.patch
    nh, nw = config.grid
    patches = (frame.astype(config.np_dtype, copy=False)
               .reshape(3, nh, p, nw, p).transpose(1, 3, 0, 2, 4).reshape(nh * nw, 3 * p * p))
    with counting_stage(counter, "patch_embed"):
        x = matmul(patches, weights.patch_w, counter)
    return x.reshape(nh, nw, -1) + weights.pos_embed


def mlp(x: np.ndarray, lp: LayerParams, counter: Optional[MacCounter] = None) -> np.ndarray:
    with counting_stage(counter, "mlp"):
        h = gelu(matmul(x, lp.w1, counter) + lp.b1)
        return matmul(h, lp.w2, counter) + lp.b2


def transformer_layer(z: np.ndarray, layer_index: int, state: EncoderState,
                      counter: Optional[MacCounter] = None) -> np.ndarray:
    """``Y = StreamingT2D(LN(Z)) + Z; Z' = MLP(LN(Y)) + Y``; advances the layer's pool."""
    cfg = state.config
    if not 0 <= layer_index < cfg.layers:
        raise IndexError(f"layer {layer_index} out of range for {cfg.layers} layers")
    lp = state.weights.layers[layer_index]
    nh, nw, c = z.shape
    a = layer_norm(z, lp.ln1_g, lp.ln1_b, cfg.ln_eps)
    att, pool = streaming_t2d_attention(
        a, state.pools[layer_index], lp.attn, state.next_frame_index, cfg.effective_window, counter
    )
    if not state.skip_memory_push:
        state.pools[layer_index] = pool
    y = att + z
    m = mlp(layer_norm(y, lp.ln2_g, lp.ln2_b, cfg.ln_eps).reshape(nh * nw, c), lp, counter)
    return m.reshape(nh, nw, c) + y


def channel_norm(f: np.ndarray, gamma: np.ndarray, beta: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Layer norm across channels at every pixel of a ``[C,h,w]`` map."""
    return layer_norm(f.transpose(1, 2, 0), gamma, beta, eps).transpose(2, 0, 1)


def resnet_block(f: np.ndarray, params: ResBlockParams, counter: Optional[MacCounter] = None,
                 eps: float = 1e-6) -> np.ndarray:
    """``F + conv3x3(gelu(norm(conv3x3(norm(F)))))`` on a ``[C,h,w]`` map."""
    with counting_stage(counter, "resnet"):
        h = conv2d(channel_norm(f, params.norm1_g, params.norm1_b, eps), params.conv1, 1, 1, counter)
        h = gelu(channel_norm(h, params.norm2_g, params.norm2_b, eps))
        return f + conv2d(h, params.conv2, 1, 1, counter)


def resolution_adaptor(f16: np.ndarray, levels: Sequence[AdaptorLevel],
                       counter: Optional[MacCounter] = None) -> dict[int, np.ndarray]:
    """Map the single-scale ``[C,h,w]`` feature to strides 4/8/16/32."""
    pyramid = {}
    with counting_stage(counter, "adaptor"):
        for level in levels:
            if level.kind == "up":
                pyramid[level.stride] = conv2d_transpose(f16, level.kernel, level.factor, counter)
            else:
                pyramid[level.stride] = conv2d(f16, level.kernel, level.factor, 0, counter)
    return pyramid


def _stage_end(config: ModelConfig, layer_index: int) -> Optional[int]:
    if (layer_index + 1) % config.layers_per_stage == 0:
        return (layer_index + 1) // config.layers_per_stage - 1
    return None


def encode_frame(state: EncoderState, frame: np.ndarray, counter: Optional[MacCounter] = None) -> FrameFeatures:
    cfg, w = state.config, state.weights
    z = patch_embed(frame, cfg, w, counter)
    for li in range(cfg.layers):
        z = transformer_layer(z, li, state, counter)
        stage = _stage_end(cfg, li)
        if cfg.mode == "frame" and stage is not None:
            z = resnet_block(z.transpose(2, 0, 1), w.resblocks[stage], counter, cfg.ln_eps).transpose(1, 2, 0)
    state.next_frame_index += 1
    pyramid = None
    if cfg.mode == "frame":
        pyramid = resolution_adaptor(np.ascontiguousarray(z.transpose(2, 0, 1)), w.adaptor, counter)
    return FrameFeatures(np.ascontiguousarray(z), pyramid)


def encode_sequence(state: EncoderState, frames, counter: Optional[MacCounter] = None) -> list[FrameFeatures]:
    if len(frames) == 0:
        raise ValueError("encode_sequence needs at least one frame")
    return [encode_frame(state, f, counter) for f in frames]


def reference_vit_forward(config: ModelConfig, weights: EncoderWeights, frame: np.ndarray,
                          counter: Optional[MacCounter] = None) -> FrameFeatures:
    """Plain image ViT on one frame using the same weights: no memory, no temporal branch."""
    nh, nw = config.grid
    c = config.channels
    window = config.effective_window
    z = patch_embed(frame, config, weights, counter)
    for li, lp in enumerate(weights.layers):
        a = layer_norm(z, lp.ln1_g, lp.ln1_b, config.ln_eps)
        with counting_stage(counter, "spatial_attention"):
            flat = a.reshape(nh * nw, c)
            q = matmul(flat, lp.attn.w_q, counter)
            k = matmul(flat, lp.attn.w_k, counter)
            v = matmul(flat, lp.attn.w_v, counter)
            if window is None:
                o = scaled_dot_attention(q, k, v, lp.attn.heads, counter)
            else:
                o = _windowed(q, k, v, nh, nw, window, lp.attn.heads, counter)
            o = matmul(o, lp.attn.w_o, counter)
        y = o.reshape(nh, nw, c) + z
        m = mlp(layer_norm(y, lp.ln2_g, lp.ln2_b, config.ln_eps).reshape(nh * nw, c), lp, counter)
        z = m.reshape(nh, nw, c) + y
        stage = _stage_end(config, li)
        if config.mode == "frame" and stage is not None:
            z = resnet_block(z.transpose(2, 0, 1), weights.resblocks[stage], counter, config.ln_eps).transpose(1, 2, 0)
    pyramid = None
    if config.mode == "frame":
        pyramid = resolution_adaptor(np.ascontiguousarray(z.transpose(2, 0, 1)), weights.adaptor, counter)
    return FrameFeatures(np.ascontiguousarray(z), pyramid)


def _windowed(q, k, v, nh, nw, window, heads, counter):
    c = q.shape[-1]
    qw, bias = window_partition(q.reshape(nh, nw, c), window)
    kw, _ = window_partition(k.reshape(nh, nw, c), window)
    vw, _ = window_partition(v.reshape(nh, nw, c), window)
    ow = scaled_dot_attention(qw, kw, vw, heads, counter, key_bias=bias)
    return window_merge(ow, nh, nw, window).reshape(nh * nw, c)

"""Temporal decoder for sequence tasks: bidirectional Transformer layers over
one pooled token per frame, temporal mean, linear classifier."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .attention import scaled_dot_attention
from .config import ModelConfig
from .encoder import FrameFeatures
from .errors import DimensionError
from .kernels import MacCounter, counting_stage, gelu, layer_norm, matmul


@dataclass
class DecoderLayer:
    ln1_g: np.ndarray
    ln1_b: np.ndarray
    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    w_o: np.ndarray
    ln2_g: np.ndarray
    ln2_b: np.ndarray
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray


@dataclass
class DecoderWeights:
    layers: list[DecoderLayer]
    w_cls: np.ndarray                 # [C, num_classes]
    heads: int
    pos_embed: Optional[np.ndarray]   # [max_frames, C] or None
    ln_eps: float = 1e-6


def init_decoder_weights(config: ModelConfig, pos_embed: Optional[bool] = None) -> DecoderWeights:
    rng = np.random.default_rng([config.seed, 1])
    dt = config.np_dtype
    c, hid = config.channels, config.hidden

    def u(shape, fan_in):
        a = math.sqrt(1.0 / fan_in)
        return rng.uniform(-a, a, size=shape).astype(dt)

    layers = []
    for _ in range(config.decoder_layers):
        layers.append(DecoderLayer(
            np.ones(c, dt), np.zeros(c, dt),
            u((c, c), c), u((c, c), c), u((c, c), c), u((c, c), c),
            np.ones(c, dt), np.zeros(c, dt),
            u((c, hid), c), np.zeros(hid, dt), u((hid, c), hid), np.zeros(c, dt),
        ))
    w_cls = u((c, config.num_classes), c)
    use_pos = config.decoder_pos_embed if pos_embed is None else pos_embed
    pe = rng.uniform(-0.02, 0.02, size=(config.decoder_max_frames, c)).astype(dt) if use_pos else None
    return DecoderWeights(layers, w_cls, config.heads, pe, config.ln_eps)


def pool_frames(features: Sequence[FrameFeatures]) -> np.ndarray:
    """Spatial mean of each frame's final token grid -> ``[T, C]``."""
    if len(features) == 0:
        raise ValueError("pool_frames needs at least one frame")
    return np.stack([f.tokens.mean(axis=(0, 1)) for f in features])


def decode(pooled: np.ndarray, w: DecoderWeights, counter: Optional[MacCounter] = None) -> np.ndarray:
    if pooled.ndim != 2 or pooled.shape[0] < 1:
        raise DimensionError(f"decode expects [T, C] with T >= 1, got {pooled.shape}")
    t = pooled.shape[0]
    x = pooled
    if w.pos_embed is not None:
        if t > w.pos_embed.shape[0]:
            raise DimensionError(f"{t} frames exceed decoder positional table of {w.pos_embed.shape[0]}")
        x = x + w.pos_embed[:t]
    with counting_stage(counter, "decoder"):
        for lp in w.layers:
            a = layer_norm(x, lp.ln1_g, lp.ln1_b, w.ln_eps)
            o = scaled_dot_attention(matmul(a, lp.w_q, counter), matmul(a, lp.w_k, counter),
                                     matmul(a, lp.w_v, counter), w.heads, counter)
            y = matmul(o, lp.w_o, counter) + x
            h = gelu(matmul(layer_norm(y, lp.ln2_g, lp.ln2_b, w.ln_eps), lp.w1, counter) + lp.b1)
            x = matmul(h, lp.w2, counter) + lp.b2 + y
        return matmul(x.mean(axis=0, keepdims=True), w.w_cls, counter)[0]

from __future__ import annotations

import numpy as np
import pytest

from streamvit.config import desk_config
from streamvit.decoder import decode, init_decoder_weights, pool_frames
from streamvit.encoder import FrameFeatures
from streamvit.errors import DimensionError
from streamvit.kernels import MacCounter, gelu


def ln(x, g, b, eps=1e-6):
    mu = x.mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(((x - mu) ** 2).mean(-1, keepdims=True) + eps) * g + b


def mha(q, k, v, heads):
    d = q.shape[1] // heads
    out = []
    for h in range(heads):
        sl = slice(h * d, (h + 1) * d)
        s = q[:, sl] @ k[:, sl].T / np.sqrt(d)
        p = np.exp(s - s.max(1, keepdims=True))
        out.append(p / p.sum(1, keepdims=True) @ v[:, sl])
    return np.concatenate(out, axis=1)


def decoder_oracle(x, w):
    if w.pos_embed is not None:
        x = x + w.pos_embed[:len(x)]
    for lp in w.layers:
        a = ln(x, lp.ln1_g, lp.ln1_b)
        y = mha(a @ lp.w_q, a @ lp.w_k, a @ lp.w_v, w.heads) @ lp.w_o + x
        x = gelu(ln(y, lp.ln2_g, lp.ln2_b) @ lp.w1 + lp.b1) @ lp.w2 + lp.b2 + y
    return x.mean(0) @ w.w_cls


def test_four_layer_default():
    w = init_decoder_weights(desk_config())
    assert len(w.layers) == 4
    assert w.w_cls.shape == (32, 10)


def test_matches_composition_oracle():
    w = init_decoder_weights(desk_config())
    x = np.random.default_rng(0).standard_normal((4, 32))
    np.testing.assert_allclose(decode(x, w), decoder_oracle(x, w), atol=1e-12)


def test_single_frame_is_token_mlp_stack():
    w = init_decoder_weights(desk_config(), pos_embed=False)
    x = np.random.default_rng(1).standard_normal((1, 32))
    out = decode(x, w)
    h = x
    for lp in w.layers:
        # attention over one token returns its value row
        y = (ln(h, lp.ln1_g, lp.ln1_b) @ lp.w_v) @ lp.w_o + h
        h = gelu(ln(y, lp.ln2_g, lp.ln2_b) @ lp.w1 + lp.b1) @ lp.w2 + lp.b2 + y
    np.testing.assert_allclose(out, h[0] @ w.w_cls, atol=1e-12)


def test_permutation_invariance_only_without_positions():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((5, 32))
    perm = rng.permutation(5)
    plain = init_decoder_weights(desk_config(), pos_embed=False)
    np.testing.assert_allclose(decode(x[perm], plain), decode(x, plain), atol=1e-12)
    ordered = init_decoder_weights(desk_config(), pos_embed=True)
    assert not np.allclose(decode(x[perm], ordered), decode(x, ordered), atol=1e-9)


def test_pooling_and_errors():
    feats = [FrameFeatures(np.full((2, 3, 4), float(t))) for t in range(3)]
    np.testing.assert_array_equal(pool_frames(feats), np.repeat(np.arange(3.0)[:, None], 4, axis=1))
    with pytest.raises(ValueError):
        pool_frames([])
    w = init_decoder_weights(desk_config(decoder_max_frames=2))
    with pytest.raises(DimensionError):
        decode(np.zeros((3, 32)), w)
    with pytest.raises(DimensionError):
        decode(np.zeros(32), w)


def test_decoder_mac_count():
    cfg = desk_config()
    w = init_decoder_weights(cfg)
    counter = MacCounter()
    t, c, hid = 6, cfg.channels, cfg.hidden
    decode(np.zeros((t, c)), w, counter)
    expect = cfg.decoder_layers * (4 * t * c * c + 2 * t * t * c + 2 * t * c * hid) + c * cfg.num_classes
    assert counter.by_stage == {"decoder": expect}

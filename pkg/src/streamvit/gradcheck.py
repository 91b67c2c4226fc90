"""Reverse-mode gradients of one streaming Transformer layer, checked
against central finite differences.

The layer computes ``Y = StreamingT2D(LN1(X)) + X`` and
``out = MLP(LN2(Y)) + Y`` for one frame given the memory pool that holds the
previous frames. Memory entries are stop-gradient values: with
``honor_sg=True`` nothing flows back through the stored keys/values (including
the entry the current frame pushes), and the reported memory block is zero.
With ``honor_sg=False`` the memory block holds the true derivative with
respect to every stored entry and the current frame's own entry feeds back
into ``x``/``W_k``/``W_v``/``LN1``.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .attention import AttentionWeights, MemoryPool, memory_push, streaming_t2d_step, window_merge, window_partition
from .encoder import LayerParams, mlp
from .kernels import gelu, layer_norm

ATTN_PARAMS = ("w_q", "w_k", "w_v", "w_o", "wt_q", "wt_o_xt", "wt_o_ty", "alpha_xt", "alpha_ty")
LAYER_PARAMS = ("ln1_g", "ln1_b", "ln2_g", "ln2_b", "w1", "b1", "w2", "b2")
_GELU_C = math.sqrt(2.0 / math.pi)


@dataclass
class LayerGradients:
    output: np.ndarray
    x: np.ndarray
    params: dict[str, np.ndarray]
    memory_k: np.ndarray     # [T_mem, N_h, N_w, C], entries after the push
    memory_v: np.ndarray


def layer_forward(x, pool: MemoryPool, lp: LayerParams, frame_index: int, window: Optional[int] = None,
                  eps: float = 1e-6, memory_kv=None) -> np.ndarray:
    """The encoder's layer computation as a pure function (pool is not kept)."""
    nh, nw, c = x.shape
    a = layer_norm(x, lp.ln1_g, lp.ln1_b, eps)
    if memory_kv is not None:
        memory_kv = tuple(memory_kv)
    step = streaming_t2d_step(a, pool, lp.attn, frame_index, window, memory_kv=memory_kv)
    y = step.out + x
    m = mlp(layer_norm(y, lp.ln2_g, lp.ln2_b, eps).reshape(nh * nw, c), lp)
    return m.reshape(nh, nw, c) + y


# -- primitive forward/backward pairs ---------------------------------------------

def _ln_fwd(x, g, b, eps):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    return xhat * g + b, (xhat, inv)


def _ln_bwd(dy, cache, g):
    xhat, inv = cache
    lead = tuple(range(dy.ndim - 1))
    dg = (dy * xhat).sum(axis=lead)
    db = dy.sum(axis=lead)
    dxhat = dy * g
    dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    return dx, dg, db


def _gelu_grad(x):
    u = _GELU_C * (x + 0.044715 * x ** 3)
    th = np.tanh(u)
    return 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * _GELU_C * (1.0 + 3 * 0.044715 * x * x)


def _heads(x, h):
    *lead, n, c = x.shape
    return np.moveaxis(x.reshape(*lead, n, h, c // h), -2, -3)


def _unheads(x):
    *lead, h, n, d = x.shape
    return np.moveaxis(x, -3, -2).reshape(*lead, n, h * d)


def _attn_fwd(q, k, v, heads, bias=None):
    d = q.shape[-1] // heads
    scale = 1.0 / math.sqrt(d)
    qh, kh, vh = _heads(q, heads), _heads(k, heads), _heads(v, heads)
    s = (qh @ np.swapaxes(kh, -1, -2)) * scale
    if bias is not None:
        s = s + bias[..., None, None, :]
    s = s - s.max(axis=-1, keepdims=True)
    p = np.exp(s)
    p /= p.sum(axis=-1, keepdims=True)
    return _unheads(p @ vh), (p, qh, kh, vh, scale, heads)


def _attn_bwd(dout, cache):
    p, qh, kh, vh, scale, heads = cache
    doh = _heads(dout, heads)
    dp = doh @ np.swapaxes(vh, -1, -2)
    dvh = np.swapaxes(p, -1, -2) @ doh
    ds = p * (dp - (dp * p).sum(axis=-1, keepdims=True)) * scale
    dqh = ds @ kh
    dkh = np.swapaxes(ds, -1, -2) @ qh
    return _unheads(dqh), _unheads(dkh), _unheads(dvh)


def _spatial_fwd(q, k, v, heads, window, nh, nw):
    c = q.shape[-1]
    if window is None:
        o, cache = _attn_fwd(q, k, v, heads)
        return o, cache
    qw, bias = window_partition(q.reshape(nh, nw, c), window)
    kw, _ = window_partition(k.reshape(nh, nw, c), window)
    vw, _ = window_partition(v.reshape(nh, nw, c), window)
    ow, cache = _attn_fwd(qw, kw, vw, heads, bias)
    return window_merge(ow, nh, nw, window).reshape(nh * nw, c), cache


def _spatial_bwd(do, cache, window, nh, nw):
    c = do.shape[-1]
    if window is None:
        return _attn_bwd(do, cache)
    dow, _ = window_partition(do.reshape(nh, nw, c), window)
    dqw, dkw, dvw = _attn_bwd(dow, cache)
    return tuple(window_merge(g, nh, nw, window).reshape(nh * nw, c) for g in (dqw, dkw, dvw))


# -- the layer backward --------------------------------------------------------------

def layer_backward(x: np.ndarray, pool: MemoryPool, lp: LayerParams, upstream: np.ndarray,
                   honor_sg: bool = True, frame_index: Optional[int] = None, window: Optional[int] = None,
                   eps: float = 1e-6) -> LayerGradients:
    """Exact gradients of ``<upstream, layer_forward(x)>``."""
    if upstream.shape != x.shape:
        raise ValueError(f"upstream shape {upstream.shape} != layer output shape {x.shape}")
    if frame_index is None:
        frame_index = pool.entries[-1].frame_index + 1 if pool.entries else 1
    w: AttentionWeights = lp.attn
    nh, nw, c = x.shape
    n, h = nh * nw, w.heads

    # forward with caches
    a, ln1_cache = _ln_fwd(x.reshape(n, c), lp.ln1_g, lp.ln1_b, eps)
    q, k, v = a @ w.w_q, a @ w.w_k, a @ w.w_v
    oc, sp_cache = _spatial_fwd(q, k, v, h, window, nh, nw)
    o = oc @ w.w_o
    new_pool = memory_push(pool, frame_index, k.reshape(nh, nw, c), v.reshape(nh, nw, c))
    keys, values = new_pool.keys(), new_pool.values()
    t_mem = keys.shape[0]
    offsets = np.array([frame_index - e.frame_index for e in new_pool.entries])
    if w.time_embed is not None:
        keys = keys + w.time_embed[offsets][:, None, None, :]
    qt = o @ w.wt_q
    qg = qt.reshape(nh, nw, c)
    k_rows = keys.transpose(1, 0, 2, 3).reshape(nh, t_mem * nw, c)
    v_rows = values.transpose(1, 0, 2, 3).reshape(nh, t_mem * nw, c)
    oxt, xt_cache = _attn_fwd(qg, k_rows, v_rows, h)
    k_cols = keys.transpose(2, 0, 1, 3).reshape(nw, t_mem * nh, c)
    v_cols = values.transpose(2, 0, 1, 3).reshape(nw, t_mem * nh, c)
    oty_t, ty_cache = _attn_fwd(qg.transpose(1, 0, 2), k_cols, v_cols, h)
    oxt = oxt.reshape(n, c)
    oty = oty_t.transpose(1, 0, 2).reshape(n, c)
    bxt, bty = oxt @ w.wt_o_xt, oty @ w.wt_o_ty
    att = o + w.alpha_xt * bxt + w.alpha_ty * bty
    y = att + x.reshape(n, c)
    cin, ln2_cache = _ln_fwd(y, lp.ln2_g, lp.ln2_b, eps)
    h1 = cin @ lp.w1 + lp.b1
    g1 = gelu(h1)
    out = g1 @ lp.w2 + lp.b2 + y

    # backward
    grads: dict[str, np.ndarray] = {}
    G = upstream.reshape(n, c)
    grads["w2"] = g1.T @ G
    grads["b2"] = G.sum(axis=0)
    dh1 = (G @ lp.w2.T) * _gelu_grad(h1)
    grads["w1"] = cin.T @ dh1
    grads["b1"] = dh1.sum(axis=0)
    dy_ln, grads["ln2_g"], grads["ln2_b"] = _ln_bwd(dh1 @ lp.w1.T, ln2_cache, lp.ln2_g)
    dy = G + dy_ln
    datt = dy
    dx = dy.copy()

    grads["alpha_xt"] = (datt * bxt).sum(axis=0)
    grads["alpha_ty"] = (datt * bty).sum(axis=0)
    dbxt, dbty = datt * w.alpha_xt, datt * w.alpha_ty
    grads["wt_o_xt"] = oxt.T @ dbxt
    grads["wt_o_ty"] = oty.T @ dbty
    doxt = (dbxt @ w.wt_o_xt.T).reshape(nh, nw, c)
    doty = (dbty @ w.wt_o_ty.T).reshape(nh, nw, c).transpose(1, 0, 2)
    dq_xt, dk_rows, dv_rows = _attn_bwd(doxt, xt_cache)
    dq_ty, dk_cols, dv_cols = _attn_bwd(doty, ty_cache)
    dkeys = (dk_rows.reshape(nh, t_mem, nw, c).transpose(1, 0, 2, 3)
             + dk_cols.reshape(nw, t_mem, nh, c).transpose(1, 2, 0, 3))
    dvals = (dv_rows.reshape(nh, t_mem, nw, c).transpose(1, 0, 2, 3)
             + dv_cols.reshape(nw, t_mem, nh, c).transpose(1, 2, 0, 3))
    if w.time_embed is not None:
        dte = np.zeros_like(w.time_embed)
        np.add.at(dte, offsets, dkeys.sum(axis=(1, 2)))
        grads["time_embed"] = dte
    dqt = dq_xt.reshape(n, c) + dq_ty.transpose(1, 0, 2).reshape(n, c)
    grads["wt_q"] = o.T @ dqt
    do = datt + dqt @ w.wt_q.T

    grads["w_o"] = oc.T @ do
    dq, dk, dv = _spatial_bwd(do @ w.w_o.T, sp_cache, window, nh, nw)
    if honor_sg:
        mem_k = np.zeros_like(dkeys)
        mem_v = np.zeros_like(dvals)
    else:
        mem_k, mem_v = dkeys, dvals
        # the current frame's entry is the last one in the pool
        dk = dk + dkeys[-1].reshape(n, c)
        dv = dv + dvals[-1].reshape(n, c)
    grads["w_q"], grads["w_k"], grads["w_v"] = a.T @ dq, a.T @ dk, a.T @ dv
    da = dq @ w.w_q.T + dk @ w.w_k.T + dv @ w.w_v.T
    dx_ln, grads["ln1_g"], grads["ln1_b"] = _ln_bwd(da, ln1_cache, lp.ln1_g)
    dx = dx + dx_ln
    return LayerGradients(out.reshape(nh, nw, c), dx.reshape(nh, nw, c), grads, mem_k, mem_v)


# -- finite differences ----------------------------------------------------------------

def finite_diff(f: Callable[[np.ndarray], float], theta: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences ``(f(θ+h e_i) - f(θ-h e_i)) / 2h`` for every coordinate."""
    if h <= 0:
        raise ValueError("step h must be positive")
    theta = np.array(theta, dtype=np.float64, copy=True)
    grad = np.zeros_like(theta)
    flat, gflat = theta.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f(theta)
        flat[i] = old - h
        fm = f(theta)
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * h)
    return grad


def rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-3) -> float:
    """Max over coordinates of ``|a-n| / max(|a|, |n|, floor * max|n|, 1e-12)``.

    The block-relative floor keeps coordinates far below the block's scale,
    whose differences are pure cancellation noise, from dominating.
    """
    if analytic.size == 0:
        return 0.0
    scale = max(floor * float(np.max(np.abs(numeric))), 1e-12)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), scale)
    return float(np.max(np.abs(analytic - numeric) / denom))


# -- a self-contained check ------------------------------------------------------------

@dataclass
class GradcheckCase:
    x: np.ndarray
    pool: MemoryPool
    params: LayerParams
    upstream: np.ndarray
    frame_index: int
    window: Optional[int] = None


def random_case(seed: int, grid=(3, 5), channels: int = 8, heads: int = 2, past_frames: int = 2,
                capacity: Optional[int] = None, window: Optional[int] = None,
                time_embed: bool = False) -> GradcheckCase:
    """Random float64 layer, input, memory and upstream gradient.

    Fusion gates are drawn from U(-1, 1) rather than the 1e-4 initial value:
    at 1e-4 the temporal parameters' gradients fall below what central
    differences can resolve against the size of the loss.
    """
    rng = np.random.default_rng([seed, 11])
    nh, nw = grid
    c, hid = channels, 2 * channels

    def r(*shape, scale=1.0):
        return rng.uniform(-scale, scale, size=shape)

    s = 1.0 / math.sqrt(c)
    te = r(max(past_frames + 1, capacity or 0), c, scale=0.5) if time_embed else None
    attn = AttentionWeights(r(c, c, scale=s), r(c, c, scale=s), r(c, c, scale=s), r(c, c, scale=s),
                            r(c, c, scale=s), r(c, c, scale=s), r(c, c, scale=s), r(c), r(c),
                            heads, te)
    lp = LayerParams(attn, 1.0 + r(c, scale=0.3), r(c, scale=0.3), 1.0 + r(c, scale=0.3), r(c, scale=0.3),
                     r(c, hid, scale=s), r(hid, scale=0.1), r(hid, c, scale=1 / math.sqrt(hid)), r(c, scale=0.1))
    pool = MemoryPool(capacity)
    for i in range(1, past_frames + 1):
        pool = memory_push(pool, i, rng.standard_normal((nh, nw, c)), rng.standard_normal((nh, nw, c)))
    return GradcheckCase(rng.standard_normal((nh, nw, c)), pool, lp, rng.standard_normal((nh, nw, c)),
                         past_frames + 1, window)


def _with_param(lp: LayerParams, name: str, value: np.ndarray) -> LayerParams:
    if name in ATTN_PARAMS or name == "time_embed":
        return dataclasses.replace(lp, attn=dataclasses.replace(lp.attn, **{name: value}))
    return dataclasses.replace(lp, **{name: value})


def _get_param(lp: LayerParams, name: str) -> np.ndarray:
    return getattr(lp.attn, name) if name in ATTN_PARAMS or name == "time_embed" else getattr(lp, name)


def _replace_entry(pool: MemoryPool, index: int, k=None, v=None) -> MemoryPool:
    entries = list(pool.entries)
    e = entries[index]
    entries[index] = dataclasses.replace(e, k=e.k if k is None else k, v=e.v if v is None else v)
    return MemoryPool(pool.capacity, tuple(entries))


def check_case(case: GradcheckCase, honor_sg: bool, h: float = 1e-5, floor: float = 1e-3) -> dict[str, float]:
    """Max relative error per gradient block between analytic and central differences.

    Under ``honor_sg`` the differenced function keeps the current frame's
    memory entry fixed at its unperturbed value (that is what stop-gradient
    means for a perturbation). Without it the entry moves with the inputs,
    and the stored entries themselves are differenced for the memory block.
    """
    g = layer_backward(case.x, case.pool, case.params, case.upstream, honor_sg, case.frame_index, case.window)
    up = case.upstream
    frozen_kv = None
    if honor_sg:
        a = layer_norm(case.x, case.params.ln1_g, case.params.ln1_b, 1e-6)
        frozen_kv = (a @ case.params.attn.w_k, a @ case.params.attn.w_v)

    def loss(x, pool, lp):
        out = layer_forward(x, pool, lp, case.frame_index, case.window, memory_kv=frozen_kv)
        return float(np.sum(up * out))

    errors = {"x": rel_error(g.x, finite_diff(lambda t: loss(t, case.pool, case.params), case.x, h), floor)}
    names = ATTN_PARAMS + LAYER_PARAMS + (("time_embed",) if case.params.attn.time_embed is not None else ())
    for name in names:
        num = finite_diff(lambda t, nm=name: loss(case.x, case.pool, _with_param(case.params, nm, t)),
                          _get_param(case.params, name), h)
        errors[name] = rel_error(g.params[name], num, floor)
    if not honor_sg:
        # derivative w.r.t. the stored past entries, differenced directly
        # (the current frame's entry is covered through x / W_k / W_v above)
        past = len(case.pool)
        n_keep = len(memory_push(case.pool, case.frame_index, case.x, case.x)) - 1
        offset = past - n_keep
        worst = 0.0
        for j in range(n_keep):
            for which in ("k", "v"):
                src = getattr(case.pool.entries[offset + j], which)
                num = finite_diff(
                    lambda t, j=j, w=which: loss(case.x, _replace_entry(case.pool, offset + j, **{w: t}), case.params),
                    src, h)
                ana = (g.memory_k if which == "k" else g.memory_v)[j]
                worst = max(worst, rel_error(ana, num, floor))
        errors["memory"] = worst
    return errors

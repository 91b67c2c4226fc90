"""Dense numeric kernels used by every model component.

Tensors are plain ``numpy.ndarray`` values. The element type (float32 or
float64) is chosen once per run and every kernel preserves it. Products go
through :func:`matmul` / :func:`conv2d` / :func:`conv2d_transpose` so that an
optional :class:`MacCounter` sees every multiply-accumulate.
"""

from __future__ import annotations

import math
from collections import defaultdict
from contextlib import contextmanager
from typing import Iterator, Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, DimensionError

DTYPES = {"f32": np.float32, "f64": np.float64}

_GELU_C = math.sqrt(2.0 / math.pi)


def resolve_dtype(name) -> np.dtype:
    if isinstance(name, str):
        try:
            return np.dtype(DTYPES[name])
        except KeyError:
            raise ConfigError(f"unknown dtype {name!r}; expected one of {sorted(DTYPES)}") from None
    return np.dtype(name)


class MacCounter:
    """Counts scalar multiply-accumulates, optionally split by named stage.

    Use :meth:`stage` as a context manager to attribute the MACs of a region
    to a stage name; nested stages attribute to the innermost name.
    """

    def __init__(self, enabled: bool = True):
        self.enabled = enabled
        self.macs = 0
        self.by_stage: dict[str, int] = defaultdict(int)
        self._stack: list[str] = []

    def add(self, n: int) -> None:
        if not self.enabled:
            return
        n = int(n)
        self.macs += n
        self.by_stage[self._stack[-1] if self._stack else "other"] += n

    @contextmanager
    def stage(self, name: str) -> Iterator["MacCounter"]:
        self._stack.append(name)
        try:
            yield self
        finally:
            self._stack.pop()

    def reset(self) -> None:
        self.macs = 0
        self.by_stage.clear()


@contextmanager
def counting_stage(counter: Optional[MacCounter], name: str):
    """``counter.stage(name)`` that tolerates ``counter is None``."""
    if counter is None:
        yield None
    else:
        with counter.stage(name):
            yield counter


def matmul(a: np.ndarray, b: np.ndarray, counter: Optional[MacCounter] = None) -> np.ndarray:
    """Matrix product over the last two axes; leading (batch) axes must match exactly."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2] or a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = np.matmul(np.ascontiguousarray(a), np.ascontiguousarray(b))
    if counter is not None:
        batch = int(np.prod(a.shape[:-2], dtype=np.int64)) if a.ndim > 2 else 1
        counter.add(batch * a.shape[-2] * a.shape[-1] * b.shape[-1])
    return out


def softmax_rows(m: np.ndarray) -> np.ndarray:
    """Softmax along the last axis, stabilised by subtracting the row max.

    Entries equal to ``-inf`` receive exactly zero weight; every row must
    contain at least one finite entry.
    """
    shifted = m - np.max(m, axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=-1, keepdims=True)


def layer_norm(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    if x.shape[-1] != gamma.shape[-1] or gamma.shape != beta.shape:
        raise DimensionError(f"layer_norm: last axis {x.shape} vs gamma {gamma.shape} / beta {beta.shape}")
    if eps <= 0:
        raise ConfigError("layer_norm eps must be positive")
    mu = np.mean(x, axis=-1, keepdims=True)
    xc = x - mu
    # constant tokens: mean rounding must not leak into the output
    xc = np.where(np.ptp(x, axis=-1, keepdims=True) == 0, 0.0, xc).astype(x.dtype, copy=False)
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    return xc / np.sqrt(var + eps) * gamma + beta


def gelu(x: np.ndarray) -> np.ndarray:
    """GELU, tanh approximation."""
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + 0.044715 * x * x * x)))


def conv_out_size(size: int, k: int, stride: int, pad: int) -> int:
    span = size + 2 * pad - k
    if stride < 1 or span < 0 or span % stride:
        raise DimensionError(
            f"conv output size not integral: size={size} kernel={k} stride={stride} pad={pad}"
        )
    return span // stride + 1


def conv2d(
    x: np.ndarray,
    kernel: np.ndarray,
    stride: int = 1,
    pad: int = 0,
    counter: Optional[MacCounter] = None,
) -> np.ndarray:
    """Cross-correlation of ``x[C_in,H,W]`` with ``kernel[C_out,C_in,kh,kw]`` (no bias)."""
    if x.ndim != 3 or kernel.ndim != 4 or kernel.shape[1] != x.shape[0]:
        raise DimensionError(f"conv2d shape mismatch: input {x.shape}, kernel {kernel.shape}")
    c_out, c_in, kh, kw = kernel.shape
    h_out = conv_out_size(x.shape[1], kh, stride, pad)
    w_out = conv_out_size(x.shape[2], kw, stride, pad)
    if pad:
        x = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    # windows: [C_in, H', W', kh, kw] -> columns [C_in*kh*kw, H'*W']
    win = sliding_window_view(x, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    cols = win.transpose(0, 3, 4, 1, 2).reshape(c_in * kh * kw, h_out * w_out)
    out = matmul(kernel.reshape(c_out, c_in * kh * kw), cols, counter)
    return out.reshape(c_out, h_out, w_out)


def conv2d_transpose(
    x: np.ndarray,
    kernel: np.ndarray,
    stride: int,
    counter: Optional[MacCounter] = None,
) -> np.ndarray:
    """Transposed convolution that upsamples exactly ``stride``-fold.

    ``kernel`` has shape ``[C_in, C_out, 2*stride, 2*stride]`` and the implicit
    padding is ``stride // 2``, so ``[C_in,H,W] -> [C_out, H*stride, W*stride]``.
    This is the adjoint of :func:`conv2d` with the same kernel, stride and pad.
    """
    if stride not in (2, 4):
        raise ConfigError(f"conv2d_transpose supports stride 2 or 4, got {stride}")
    k = 2 * stride
    if x.ndim != 3 or kernel.ndim != 4 or kernel.shape[0] != x.shape[0] or kernel.shape[2:] != (k, k):
        raise DimensionError(
            f"conv2d_transpose shape mismatch: input {x.shape}, kernel {kernel.shape} (stride {stride})"
        )
    c_in, h, w = x.shape
    c_out = kernel.shape[1]
    # every input pixel times every kernel tap: [C_out, k, k, H, W]
    taps = matmul(kernel.reshape(c_in, c_out * k * k).T, x.reshape(c_in, h * w), counter)
    taps = taps.reshape(c_out, k, k, h, w)
    full = np.zeros((c_out, (h - 1) * stride + k, (w - 1) * stride + k), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            full[:, i : i + h * stride : stride, j : j + w * stride : stride] += taps[:, i, j]
    p = stride // 2
    return full[:, p : p + h * stride, p : p + w * stride].copy()

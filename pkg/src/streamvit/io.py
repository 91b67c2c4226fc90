"""Binary sequence and feature-dump formats, and synthetic sequence generation.

Both formats are little-endian throughout. A sequence file is::

    b"SVSQ" | u32 version=1 | u32 T | u32 3 | u32 H | u32 W | T*3*H*W float32

A feature dump is::

    b"SVFT" | u32 version=1 | u32 T | u32 N_h | u32 N_w | u32 C | T*N_h*N_w*C float32
    | u32 L (pyramid levels, 0 if absent)
    | L * (u32 stride | u32 C_s | u32 h | u32 w) | per frame, per level: C_s*h*w float32
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .encoder import FrameFeatures
from .errors import FormatError

SEQ_MAGIC = b"SVSQ"
FEAT_MAGIC = b"SVFT"
VERSION = 1
_F32 = np.dtype("<f4")
SEQUENCE_KINDS = ("noise", "moving-blob")


class _Reader:
    def __init__(self, data: bytes, what: str):
        self.data, self.pos, self.what = data, 0, what

    def take(self, n: int, label: str) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(f"{self.what}: truncated at offset {self.pos} reading {label} "
                              f"({n} bytes needed, {len(self.data) - self.pos} left)")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self, label: str) -> int:
        return struct.unpack("<I", self.take(4, label))[0]

    def floats(self, count: int, label: str) -> np.ndarray:
        start = self.pos
        arr = np.frombuffer(self.take(4 * count, label), dtype=_F32).astype(np.float32)
        if not np.all(np.isfinite(arr)):
            bad = start + 4 * int(np.flatnonzero(~np.isfinite(arr))[0])
            raise FormatError(f"{self.what}: non-finite value at offset {bad}")
        return arr

    def header(self, magic: bytes):
        got = self.take(4, "magic")
        if got != magic:
            raise FormatError(f"{self.what}: bad magic {got!r} at offset 0, expected {magic!r}")
        version = self.u32("version")
        if version != VERSION:
            raise FormatError(f"{self.what}: unsupported version {version} at offset 4")

    def finish(self):
        if self.pos != len(self.data):
            raise FormatError(f"{self.what}: {len(self.data) - self.pos} trailing bytes at offset {self.pos}")


# -- sequences -----------------------------------------------------------------------

def encode_sequence_bytes(frames: np.ndarray) -> bytes:
    frames = np.asarray(frames)
    if frames.ndim != 4 or frames.shape[1] != 3:
        raise FormatError(f"sequence must be [T, 3, H, W], got {frames.shape}")
    t, _, h, w = frames.shape
    head = SEQ_MAGIC + struct.pack("<5I", VERSION, t, 3, h, w)
    return head + np.ascontiguousarray(frames, dtype=_F32).tobytes()


def decode_sequence_bytes(data: bytes) -> np.ndarray:
    r = _Reader(data, "sequence")
    r.header(SEQ_MAGIC)
    t = r.u32("T")
    ch = r.u32("channels")
    if ch != 3:
        raise FormatError(f"sequence: channels must be 3, got {ch} at offset 12")
    h, w = r.u32("H"), r.u32("W")
    if t == 0:
        raise FormatError("sequence: empty sequence (T=0) at offset 8")
    if h == 0 or w == 0:
        raise FormatError(f"sequence: zero frame size {h}x{w} at offset 16")
    arr = r.floats(t * 3 * h * w, "frame data")
    r.finish()
    return arr.reshape(t, 3, h, w)


def write_sequence(path, frames: np.ndarray) -> None:
    Path(path).write_bytes(encode_sequence_bytes(frames))


def read_sequence(path) -> np.ndarray:
    return decode_sequence_bytes(Path(path).read_bytes())


def gen_sequence(seed: int, frames: int, height: int, width: int, kind: str = "moving-blob",
                 offset: tuple[int, int] = (1, 2), sigma: float = 3.0) -> np.ndarray:
    """Deterministic synthetic float32 clip ``[T, 3, H, W]``.

    ``noise`` is i.i.d. standard normal. ``moving-blob`` is a Gaussian blob
    whose integer centre moves by ``offset = (dy, dx)`` pixels per frame
    (wrapping around), per-channel amplitudes drawn from the seed, plus a
    little background noise.
    """
    if kind not in SEQUENCE_KINDS:
        raise ValueError(f"unknown sequence kind {kind!r}; expected one of {SEQUENCE_KINDS}")
    if frames < 1 or height < 1 or width < 1:
        raise ValueError("frames, height and width must be positive")
    rng = np.random.default_rng([seed, 3])
    if kind == "noise":
        return rng.standard_normal((frames, 3, height, width)).astype(np.float32)
    cy, cx = int(rng.integers(height)), int(rng.integers(width))
    amp = rng.uniform(0.5, 2.0, size=3)
    yy, xx = np.mgrid[0:height, 0:width]
    out = np.empty((frames, 3, height, width), np.float32)
    for t in range(frames):
        y0, x0 = blob_center(cy, cx, t, offset, height, width)
        dy = np.minimum(np.abs(yy - y0), height - np.abs(yy - y0))
        dx = np.minimum(np.abs(xx - x0), width - np.abs(xx - x0))
        blob = np.exp(-(dy ** 2 + dx ** 2) / (2 * sigma ** 2))
        out[t] = amp[:, None, None] * blob + 0.05 * rng.standard_normal((3, height, width))
    return out


def blob_center(cy: int, cx: int, t: int, offset, height: int, width: int) -> tuple[int, int]:
    """Centre of the blob at 0-based frame ``t``."""
    return (cy + t * offset[0]) % height, (cx + t * offset[1]) % width


# -- feature dumps -------------------------------------------------------------------

@dataclass
class FeatureDump:
    tokens: np.ndarray                            # [T, N_h, N_w, C] float32
    pyramid: Optional[dict[int, np.ndarray]]      # stride -> [T, C_s, h, w]

    @classmethod
    def from_features(cls, feats: Sequence[FrameFeatures]) -> "FeatureDump":
        if len(feats) == 0:
            raise ValueError("no frames to dump")
        tokens = np.stack([f.tokens for f in feats]).astype(np.float32)
        pyramid = None
        if feats[0].pyramid is not None:
            pyramid = {s: np.stack([f.pyramid[s] for f in feats]).astype(np.float32) for s in feats[0].pyramid}
        return cls(tokens, pyramid)

    def to_bytes(self) -> bytes:
        t, nh, nw, c = self.tokens.shape
        parts = [FEAT_MAGIC, struct.pack("<5I", VERSION, t, nh, nw, c),
                 np.ascontiguousarray(self.tokens, dtype=_F32).tobytes()]
        levels = sorted(self.pyramid) if self.pyramid else []
        parts.append(struct.pack("<I", len(levels)))
        for s in levels:
            _, cs, h, w = self.pyramid[s].shape
            parts.append(struct.pack("<4I", s, cs, h, w))
        for ti in range(t):
            for s in levels:
                parts.append(np.ascontiguousarray(self.pyramid[s][ti], dtype=_F32).tobytes())
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, data: bytes) -> "FeatureDump":
        r = _Reader(data, "feature dump")
        r.header(FEAT_MAGIC)
        t, nh, nw, c = (r.u32(x) for x in ("T", "N_h", "N_w", "C"))
        if min(t, nh, nw, c) == 0:
            raise FormatError("feature dump: zero dimension in header at offset 8")
        tokens = r.floats(t * nh * nw * c, "tokens").reshape(t, nh, nw, c)
        n_levels = r.u32("pyramid level count")
        shapes = [tuple(r.u32(x) for x in ("stride", "C_s", "h", "w")) for _ in range(n_levels)]
        pyramid = None
        if n_levels:
            per = {s: [] for s, *_ in shapes}
            for _ in range(t):
                for s, cs, h, w in shapes:
                    per[s].append(r.floats(cs * h * w, f"stride-{s} level").reshape(cs, h, w))
            pyramid = {s: np.stack(v) for s, v in per.items()}
        r.finish()
        return cls(tokens, pyramid)


def write_features(path, feats: Sequence[FrameFeatures]) -> FeatureDump:
    dump = FeatureDump.from_features(feats)
    Path(path).write_bytes(dump.to_bytes())
    return dump


def read_features(path) -> FeatureDump:
    return FeatureDump.from_bytes(Path(path).read_bytes())

"""Property suites that certify the streaming encoder.

Each suite runs independently per seed, so seeds can be spread across worker
processes. A suite reports PASS/FAIL with the largest deviation it saw.
"""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .config import ModelConfig
from .encoder import (EncoderState, EncoderWeights, FrameFeatures, encode_sequence, init_encoder_weights,
                      reference_vit_forward)
from .io import gen_sequence
from .oracle import TemporalMask, clip_t2d_forward

SUITES = ("streaming-vs-oracle", "causality", "prefix", "gate-off", "memory-length")
TOLERANCE = {"f32": 1e-5, "f64": 1e-12}


@dataclass
class SuiteResult:
    name: str
    passed: bool
    max_dev: float = 0.0
    cases: int = 0
    notes: list[str] = field(default_factory=list)

    def merge(self, other: "SuiteResult") -> "SuiteResult":
        return SuiteResult(self.name, self.passed and other.passed, max(self.max_dev, other.max_dev),
                           self.cases + other.cases, self.notes + other.notes)


def feature_deviation(a: FrameFeatures, b: FrameFeatures) -> float:
    """Max abs difference over tokens and every pyramid level."""
    dev = float(np.max(np.abs(a.tokens.astype(np.float64) - b.tokens)))
    if a.pyramid is not None or b.pyramid is not None:
        if a.pyramid is None or b.pyramid is None or a.pyramid.keys() != b.pyramid.keys():
            return float("inf")
        for s in a.pyramid:
            dev = max(dev, float(np.max(np.abs(a.pyramid[s].astype(np.float64) - b.pyramid[s]))))
    return dev


def features_identical(a: FrameFeatures, b: FrameFeatures) -> bool:
    if not np.array_equal(a.tokens, b.tokens):
        return False
    if (a.pyramid is None) != (b.pyramid is None):
        return False
    return a.pyramid is None or all(np.array_equal(a.pyramid[s], b.pyramid[s]) for s in a.pyramid)


def _frames(config: ModelConfig, seed: int, count: int, kind: str = "noise") -> list[np.ndarray]:
    clip = gen_sequence(seed, count, config.image_h, config.image_w, kind)
    return [f.astype(config.np_dtype) for f in clip]


def _stream(config: ModelConfig, weights: EncoderWeights, frames, fault: bool) -> list[FrameFeatures]:
    state = EncoderState.create(config, weights)
    state.skip_memory_push = fault
    return encode_sequence(state, frames)


def oracle_config(config: ModelConfig) -> ModelConfig:
    """The oracle has no windowing, so narrow windows are widened to global attention."""
    win = config.effective_window
    if win is not None and win < max(config.grid):
        return config.replace(window=None)
    return config


# -- suites (one seed each) ------------------------------------------------------------

def suite_oracle(config: ModelConfig, seed: int, frames: int, fault: bool = False,
                 heads: Sequence[int] = (1, 2, 4), capacities: Sequence[Optional[int]] = (1, 2, None)) -> SuiteResult:
    """Streaming outputs of every prefix length vs the causal clip computation."""
    base = oracle_config(config).replace(seed=seed)
    tol = TOLERANCE[config.dtype]
    res = SuiteResult("streaming-vs-oracle", True)
    for h in heads:
        if base.channels % h:
            continue
        for m in capacities:
            cfg = base.replace(heads=h, memory_capacity=m)
            w = init_encoder_weights(cfg)
            clip = _frames(cfg, seed, frames)
            stream = _stream(cfg, w, clip, fault)
            mask = TemporalMask("causal", m)
            for t_len in range(1, frames + 1):
                dense = clip_t2d_forward(clip[:t_len], cfg, w, mask)
                dev = max(feature_deviation(stream[i], dense[i]) for i in range(t_len))
                res.max_dev = max(res.max_dev, dev)
                res.cases += 1
                if not dev <= tol:
                    res.passed = False
                    res.notes.append(f"seed={seed} heads={h} M={m} T={t_len} dev={dev:.3e}")
    return res


def suite_causality(config: ModelConfig, seed: int, frames: int, fault: bool = False) -> SuiteResult:
    """Outputs depend on exactly the admitted frames: future frames never matter,
    and an earlier frame still inside the memory window does."""
    cfg = config.replace(seed=seed)
    w = init_encoder_weights(cfg)
    clip = _frames(cfg, seed, frames)
    ref = _stream(cfg, w, clip, fault)
    rng = np.random.default_rng([seed, 5])
    res = SuiteResult("causality", True)
    for t in range(1, frames):
        adversarial = [(1e3 * rng.standard_normal(f.shape)).astype(f.dtype) for f in clip[t:]]
        out = _stream(cfg, w, clip[:t] + adversarial, fault)
        res.cases += 1
        for i in range(t):
            if not features_identical(out[i], ref[i]):
                res.passed = False
                res.max_dev = max(res.max_dev, feature_deviation(out[i], ref[i]))
                res.notes.append(f"seed={seed}: frame {i + 1} changed when frames > {t} were replaced")
    m = cfg.memory_capacity
    if frames >= 2 and (m is None or m >= 2):
        perturbed = list(clip)
        perturbed[0] = clip[0] + rng.standard_normal(clip[0].shape).astype(clip[0].dtype)
        out = _stream(cfg, w, perturbed, fault)
        res.cases += 1
        if features_identical(out[1], ref[1]):
            res.passed = False
            res.notes.append(f"seed={seed}: frame 2 ignores frame 1 although it is in memory")
    return res


def suite_prefix(config: ModelConfig, seed: int, frames: int, fault: bool = False) -> SuiteResult:
    cfg = config.replace(seed=seed)
    w = init_encoder_weights(cfg)
    clip = _frames(cfg, seed, frames)
    full = _stream(cfg, w, clip, fault)
    res = SuiteResult("prefix", True)
    for t in range(1, frames):
        part = _stream(cfg, w, clip[:t], fault)
        res.cases += 1
        for i in range(t):
            if not features_identical(part[i], full[i]):
                res.passed = False
                res.max_dev = max(res.max_dev, feature_deviation(part[i], full[i]))
                res.notes.append(f"seed={seed}: prefix length {t} frame {i + 1} differs")
    return res


def suite_gate_off(config: ModelConfig, seed: int, frames: int, fault: bool = False) -> SuiteResult:
    cfg = config.replace(seed=seed)
    w = init_encoder_weights(cfg)
    off = w.with_gates(0.0)
    clip = _frames(cfg, seed, frames)
    res = SuiteResult("gate-off", True)
    stream_off = _stream(cfg, off, clip, fault)
    stream_on = _stream(cfg, w, clip, fault)
    for i, f in enumerate(clip):
        ref = reference_vit_forward(cfg, off, f)
        res.cases += 1
        if not features_identical(stream_off[i], ref):
            res.passed = False
            res.max_dev = max(res.max_dev, feature_deviation(stream_off[i], ref))
            res.notes.append(f"seed={seed}: gate-off frame {i + 1} differs from the image ViT")
        if i >= 1 and features_identical(stream_on[i], ref):
            res.passed = False
            res.notes.append(f"seed={seed}: frame {i + 1} with default gates equals the image ViT")
    return res


def suite_memory_length(config: ModelConfig, seed: int, frames: int, fault: bool = False) -> SuiteResult:
    """M >= T matches unbounded memory exactly; a capacity M changes only frames after M."""
    cfg = config.replace(seed=seed, memory_capacity=None)
    w = init_encoder_weights(cfg)
    clip = _frames(cfg, seed, frames, kind="moving-blob")
    unbounded = _stream(cfg, w, clip, fault)
    res = SuiteResult("memory-length", True)
    for m in range(1, frames + 1):
        out = _stream(cfg.replace(memory_capacity=m), w, clip, fault)
        for i in range(frames):
            res.cases += 1
            same = features_identical(out[i], unbounded[i])
            if i + 1 <= m and not same:
                res.passed = False
                res.max_dev = max(res.max_dev, feature_deviation(out[i], unbounded[i]))
                res.notes.append(f"seed={seed}: M={m} frame {i + 1} differs from unbounded memory")
            if i + 1 > m and same:
                res.passed = False
                res.notes.append(f"seed={seed}: M={m} frame {i + 1} equals unbounded memory")
    return res


SUITE_FUNCS: dict[str, Callable[..., SuiteResult]] = {
    "streaming-vs-oracle": suite_oracle,
    "causality": suite_causality,
    "prefix": suite_prefix,
    "gate-off": suite_gate_off,
    "memory-length": suite_memory_length,
}


def _run_one(args) -> SuiteResult:
    name, config, seed, frames, fault = args
    return SUITE_FUNCS[name](config, seed, frames, fault)


def run_suites(config: ModelConfig, seeds: Sequence[int], frames: int = 4, fault: bool = False,
               jobs: int = 1, suites: Sequence[str] = SUITES) -> list[SuiteResult]:
    if frames < 1:
        raise ValueError("frames must be >= 1")
    unknown = set(suites) - set(SUITES)
    if unknown:
        raise ValueError(f"unknown suites {sorted(unknown)}")
    tasks = [(name, config, seed, frames, fault) for name in suites for seed in seeds]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_one, tasks))
    else:
        results = [_run_one(t) for t in tasks]
    merged: dict[str, SuiteResult] = {}
    for r in results:
        merged[r.name] = merged[r.name].merge(r) if r.name in merged else r
    return [merged[name] for name in suites if name in merged]


def format_verify_report(results: Sequence[SuiteResult], config: ModelConfig, seeds: Sequence[int],
                         frames: int) -> str:
    lines = []
    for r in results:
        lines.append(f"{'PASS' if r.passed else 'FAIL'}  {r.name:<20} max_dev={r.max_dev:.3e}  cases={r.cases}")
        lines.extend(f"      {note}" for note in r.notes[:5])
    lines.append("")
    lines.append(f"dtype={config.dtype}")
    lines.append(f"frames={frames}")
    lines.append(f"seeds={len(seeds)}")
    for r in results:
        lines.append(f"{r.name}.status={'pass' if r.passed else 'fail'}")
        lines.append(f"{r.name}.max_dev={r.max_dev:.6e}")
    lines.append(f"all_passed={'true' if all(r.passed for r in results) else 'false'}")
    return "\n".join(lines) + "\n"

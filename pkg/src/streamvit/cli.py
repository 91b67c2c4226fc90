"""Command-line interface: ``gen``, ``encode``, ``verify``, ``flops``, ``gradcheck``, ``bench``.

Exit status: 0 on success, 1 when a verification check fails, 2 on usage,
configuration or file-format errors.
"""

from __future__ import annotations

import argparse
import sys
import time
import zlib
from typing import Optional, Sequence

import numpy as np

from .config import ModelConfig, desk_config, load_config, paper_config
from .encoder import EncoderState, encode_frame, encode_sequence, init_encoder_weights
from .errors import StreamViTError
from .flops import MODES as FLOP_MODES, closed_form_flops, format_report, instrumented_flops
from .gradcheck import check_case, layer_backward, random_case
from .io import SEQUENCE_KINDS, gen_sequence, read_sequence, write_features, write_sequence
from .oracle import TemporalMask, clip_t2d_forward
from .verify import TOLERANCE, SuiteResult, feature_deviation, format_verify_report, oracle_config, run_suites

GRADCHECK_TOL = 1e-4


def _memory(text: str) -> Optional[int]:
    if text.lower() in ("inf", "none", "unbounded"):
        return None
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError("memory must be >= 1 or 'inf'")
    return value


def _grid(text: str) -> tuple[int, int]:
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"grid must look like 3x5, got {text!r}") from None
    return h, w


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", metavar="PATH", help="key = value config file (default: desk config)")
    p.add_argument("--dtype", choices=("f32", "f64"))
    p.add_argument("--memory", type=_memory, metavar="M", default=argparse.SUPPRESS,
                   help="memory capacity, integer or 'inf'")
    p.add_argument("--mode", choices=("frame", "sequence"), help="task mode")


def resolve_config(args, base: Optional[ModelConfig] = None) -> ModelConfig:
    """Config file (or ``base``, or the desk config) with command-line overrides applied."""
    if base is None:
        base = load_config(args.config) if getattr(args, "config", None) else desk_config()
    changes = {}
    if getattr(args, "dtype", None):
        changes["dtype"] = args.dtype
    if hasattr(args, "memory"):
        changes["memory_capacity"] = args.memory
    if getattr(args, "mode", None):
        changes["mode"] = args.mode
    return base.replace(**changes) if changes else base


def checksum(a: np.ndarray) -> str:
    return f"{zlib.crc32(np.ascontiguousarray(a, dtype='<f4').tobytes()):08x}"


# -- commands ------------------------------------------------------------------------

def cmd_gen(args) -> int:
    cfg = resolve_config(args)
    h = args.height or cfg.image_h
    w = args.width or cfg.image_w
    clip = gen_sequence(args.seed, args.frames, h, w, args.kind, tuple(args.offset))
    write_sequence(args.out, clip)
    print(f"wrote {args.frames} frame(s) of 3x{h}x{w} ({args.kind}, seed {args.seed}) to {args.out}")
    for t, f in enumerate(clip, 1):
        print(f"frame {t} crc32={checksum(f)}")
    return 0


def cmd_encode(args) -> int:
    cfg = resolve_config(args)
    clip = read_sequence(args.seq)
    state = EncoderState.create(cfg)
    feats = encode_sequence(state, [f.astype(cfg.np_dtype) for f in clip])
    if args.out:
        write_features(args.out, feats)
    for t, f in enumerate(feats, 1):
        line = f"frame {t} tokens crc32={checksum(f.tokens)}"
        if f.pyramid is not None:
            line += " " + " ".join(f"s{s}={checksum(f.pyramid[s])}" for s in sorted(f.pyramid))
        print(line)
    print()
    print(f"frames={len(feats)}")
    print(f"memory_capacity={'inf' if cfg.memory_capacity is None else cfg.memory_capacity}")
    print(f"tokens_shape={'x'.join(str(d) for d in feats[0].tokens.shape)}")
    return 0


def _sequence_suite(cfg: ModelConfig, clip: np.ndarray, fault: bool) -> SuiteResult:
    """Streaming vs causal oracle on a user-supplied sequence."""
    ocfg = oracle_config(cfg)
    w = init_encoder_weights(ocfg)
    frames = [f.astype(ocfg.np_dtype) for f in clip]
    state = EncoderState.create(ocfg, w)
    state.skip_memory_push = fault
    stream = encode_sequence(state, frames)
    dense = clip_t2d_forward(frames, ocfg, w, TemporalMask("causal", ocfg.memory_capacity))
    dev = max(feature_deviation(a, b) for a, b in zip(stream, dense))
    res = SuiteResult("sequence-vs-oracle", dev <= TOLERANCE[cfg.dtype], dev, len(frames))
    if not res.passed:
        res.notes.append(f"sequence file deviates from the oracle by {dev:.3e}")
    return res


def cmd_verify(args) -> int:
    cfg = resolve_config(args)
    seeds = list(range(args.seeds))
    results = run_suites(cfg, seeds, args.frames, fault=args.fault == "skip-push", jobs=args.jobs)
    if args.seq:
        results.append(_sequence_suite(cfg, read_sequence(args.seq), args.fault == "skip-push"))
    report = format_verify_report(results, cfg, seeds, args.frames)
    sys.stdout.write(report)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(report)
    return 0 if all(r.passed for r in results) else 1


def cmd_flops(args) -> int:
    cfg = resolve_config(args, paper_config() if args.paper else None)
    reports = [closed_form_flops(cfg, args.frames, m) for m in FLOP_MODES]
    if args.instrumented:
        reports += [instrumented_flops(cfg, args.frames, m) for m in FLOP_MODES]
    sys.stdout.write(format_report(reports, cfg))
    ordered = reports[0].total < reports[1].total < reports[2].total
    print(f"ordering_frame_lt_streaming_lt_clip={'true' if ordered else 'false'}")
    if args.instrumented:
        match = all(a.parts == b.parts for a, b in zip(reports[:3], reports[3:]))
        print(f"instrumented_matches_closed_form={'true' if match else 'false'}")
        return 0 if match else 1
    return 0


def cmd_gradcheck(args) -> int:
    worst = 0.0
    ok = True
    lines = []
    for seed in range(args.seeds):
        for grid in args.grid:
            case = random_case(seed, grid=grid, channels=args.channels, heads=args.heads)
            g_sg = layer_backward(case.x, case.pool, case.params, case.upstream, True, case.frame_index)
            g_raw = layer_backward(case.x, case.pool, case.params, case.upstream, False, case.frame_index)
            forward_same = np.array_equal(g_sg.output, g_raw.output)
            block_zero = not g_sg.memory_k.any() and not g_sg.memory_v.any()
            block_live = bool(g_raw.memory_k.any() or g_raw.memory_v.any())
            for sg in (True, False):
                errs = check_case(case, sg, h=args.h)
                err = max(errs.values())
                worst = max(worst, err)
                status = err <= GRADCHECK_TOL
                ok &= status
                lines.append(f"{'PASS' if status else 'FAIL'}  seed={seed} grid={grid[0]}x{grid[1]} "
                             f"sg={'on ' if sg else 'off'} max_rel_err={err:.3e} worst_block={max(errs, key=errs.get)}")
            sg_ok = forward_same and block_zero and block_live
            ok &= sg_ok
            lines.append(f"{'PASS' if sg_ok else 'FAIL'}  seed={seed} grid={grid[0]}x{grid[1]} stop-gradient "
                         f"forward_identical={forward_same} sg_block_zero={block_zero} raw_block_nonzero={block_live}")
    print("\n".join(lines))
    print()
    print(f"seeds={args.seeds}")
    print(f"h={args.h!r}")
    print(f"max_rel_err={worst:.6e}")
    print(f"tolerance={GRADCHECK_TOL!r}")
    print(f"all_passed={'true' if ok else 'false'}")
    return 0 if ok else 1


def cmd_bench(args) -> int:
    cfg = resolve_config(args)
    clip = gen_sequence(cfg.seed, args.frames, cfg.image_h, cfg.image_w, "moving-blob")
    state = EncoderState.create(cfg)
    times = []
    for f in clip:
        start = time.perf_counter()
        encode_frame(state, f.astype(cfg.np_dtype))
        times.append(time.perf_counter() - start)
    for t, dt in enumerate(times, 1):
        print(f"frame {t} {1e3 * dt:.2f} ms")
    print()
    print(f"frames={args.frames}")
    print(f"total_s={sum(times):.4f}")
    print(f"mean_ms_per_frame={1e3 * sum(times) / len(times):.3f}")
    return 0


# -- parser --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="streamvit", description="Streaming ViT reference and verification tools")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="write a synthetic sequence file")
    _common(p)
    p.add_argument("--out", required=True, metavar="PATH")
    p.add_argument("--frames", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--kind", choices=SEQUENCE_KINDS, default="moving-blob")
    p.add_argument("--height", type=int)
    p.add_argument("--width", type=int)
    p.add_argument("--offset", type=int, nargs=2, default=(1, 2), metavar=("DY", "DX"))
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("encode", help="encode a sequence file frame by frame")
    _common(p)
    p.add_argument("--seq", required=True, metavar="PATH")
    p.add_argument("--out", metavar="PATH", help="feature dump to write")
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("verify", help="run the streaming verification suites")
    _common(p)
    p.add_argument("--seeds", type=int, default=3)
    p.add_argument("--frames", type=int, default=4)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--seq", metavar="PATH", help="also check this sequence against the oracle")
    p.add_argument("--out", metavar="PATH", help="write the report here as well")
    p.add_argument("--fault", choices=("none", "skip-push"), default="none",
                   help="inject a fault (skip-push: memory pools are never advanced)")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("flops", help="MAC report for frame, streaming and clip variants")
    _common(p)
    p.add_argument("--frames", type=int, default=16)
    p.add_argument("--paper", action="store_true", help="use the 224x224 / patch-16 / 12-layer configuration")
    p.add_argument("--instrumented", action="store_true", help="also count MACs by running the model")
    p.set_defaults(func=cmd_flops)

    p = sub.add_parser("gradcheck", help="layer gradients vs central finite differences")
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--grid", type=_grid, nargs="+", default=[(3, 5), (4, 4)])
    p.add_argument("--channels", type=int, default=8)
    p.add_argument("--heads", type=int, default=2)
    p.add_argument("--h", type=float, default=1e-5)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("bench", help="wall-clock per frame (informational)")
    _common(p)
    p.add_argument("--frames", type=int, default=8)
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    for name in ("frames", "seeds", "jobs"):
        if getattr(args, name, 1) < 1:
            parser.error(f"--{name} must be >= 1")
    try:
        return args.func(args)
    except (StreamViTError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

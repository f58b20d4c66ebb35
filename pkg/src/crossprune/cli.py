"""Command-line entry point: ``crossprune {run,cost,analyze,ablate}``.

Exit codes: 0 success, 1 numerical failure, 2 invalid arguments.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from crossprune import analysis, cost_model, trace_io
from crossprune.ablation import run_ablation
from crossprune.cost_model import verify_counter
from crossprune.kv_cache import cache_bytes, crossover_tokens, live_bytes
from crossprune.model import ConfigError, ModelConfig, PruneConfig, build_model, generate, make_inputs, prefill
from crossprune.tensor_core import splitmix64_mix
from crossprune.trimming import METHODS

REPORT_SCHEMA_VERSION = 1


class NumericalError(RuntimeError):
    pass


def _floats(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _ints(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _emit(text: str, out: str | None) -> None:
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text if text.endswith("\n") else text + "\n")


def hidden_checksum(all_hiddens) -> str:
    h = hashlib.sha256()
    for hiddens in all_hiddens:
        for a in hiddens:
            h.update(np.ascontiguousarray(a, dtype="<f4").tobytes())
    return h.hexdigest()


def sequence_seed(seed: int, index: int) -> int:
    return splitmix64_mix(seed ^ (index + 1) * 0x9E37)


def cmd_run(args) -> int:
    cfg = ModelConfig(d=args.dim, m=args.ffn, n_heads=args.heads, n_kv_heads=args.kv_heads or args.heads,
                      S=args.self_layers, C=args.cross_layers, seed=args.seed, dtype_bytes=args.dtype_bytes)
    prune = PruneConfig(method=args.method, k_ratio=args.k_ratio, seed=args.seed, stride=args.stride)
    model = build_model(cfg)
    sequences, all_hiddens, states = [], [], []
    for b in range(args.batch):
        text, img = make_inputs(cfg, args.text_tokens, args.image_tokens, sequence_seed(args.seed, b),
                                zipf=args.zipf)
        hiddens, report = generate(model, text, img, prune, steps=args.steps)
        if not all(np.isfinite(h).all() for h in hiddens):
            raise NumericalError(f"non-finite hidden state in sequence {b}")
        verdict = verify_counter(report) if cfg.n_kv_heads == cfg.n_heads else None
        kept = len(report.selection.kept)
        self_b, cross_b = cache_bytes(cfg, 1, report.state.n_cur, kept)
        sequences.append({
            "index": b,
            "selection": report.selection.to_dict(),
            "remaining_ratio": report.selection.remaining_ratio,
            "cost": report.to_dict(),
            "counter_matches_analytic": None if verdict is None else verdict.ok,
            "cache_bytes": {"self": report.state.self_bytes(), "cross": report.state.cross_bytes(),
                            "analytic_self": self_b, "analytic_cross": cross_b},
            "timing": report.timing,
        })
        all_hiddens.append(hiddens)
        states.append(report.state)
        if b == 0 and args.emit_trace:
            captured = prefill(model, text, img, capture_attn=True).cross_attn
            trace = trace_io.AttnTrace(captured, {"source": "crossprune toy prefill", "seed": str(args.seed),
                                                  "method": "none"})
            trace_io.write_trace(trace, args.emit_trace)
    live_self, live_cross = live_bytes(states)
    doc = {
        "schema_version": REPORT_SCHEMA_VERSION,
        "command": "run",
        "config": {"d": cfg.d, "m": cfg.m, "n_heads": cfg.n_heads, "n_kv_heads": cfg.n_kv_heads,
                   "S": cfg.S, "C": cfg.C, "cross_positions": list(cfg.cross_positions),
                   "seed": cfg.seed, "dtype_bytes": cfg.dtype_bytes},
        "prune": {"method": prune.method, "k_ratio": prune.k_ratio, "stride": prune.stride},
        "batch": args.batch,
        "text_tokens": args.text_tokens,
        "image_tokens": args.image_tokens,
        "steps": args.steps,
        "remaining_ratio": float(np.mean([s["remaining_ratio"] for s in sequences])),
        "hidden_checksum": hidden_checksum(all_hiddens),
        "cache_bytes": {"self": live_self, "cross": live_cross,
                        "crossover_tokens_unpruned": crossover_tokens(cfg, args.image_tokens) if cfg.S else None},
        "sequences": sequences,
    }
    _emit(json.dumps(doc, indent=2), args.out)
    return 0


def cmd_cost(args) -> int:
    rows = cost_model.heatmap(args.r_grid, args.n_grid, S=args.self_layers, C=args.cross_layers,
                              n_k=args.n_k, d=args.dim, m=args.ffn)
    _emit(cost_model.heatmap_csv(rows), args.out)
    return 0


def cmd_analyze(args) -> int:
    trace = trace_io.read_trace(args.trace)
    report = analysis.analyze_trace(trace, args.k_ratio)
    _emit(analysis.report_json(report), args.out)
    return 0


def cmd_ablate(args) -> int:
    cfg = ModelConfig(d=args.dim, m=args.ffn, n_heads=args.heads, n_kv_heads=args.heads,
                      S=args.self_layers, C=args.cross_layers)
    result = run_ablation(args.workloads, args.seed, cfg=cfg, n_text=args.text_tokens,
                          n_img=args.image_tokens, target_ratio=args.target_ratio,
                          zipf=args.zipf or None, steps=args.steps, stride=args.stride)
    result = {"schema_version": REPORT_SCHEMA_VERSION, "command": "ablate", **result}
    _emit(json.dumps(result, indent=2), args.out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="crossprune", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="prefill + pseudo-decode a seeded toy model")
    run.add_argument("--method", choices=METHODS, default="none")
    run.add_argument("--k-ratio", type=float, default=1.0)
    run.add_argument("--stride", type=int, default=2)
    run.add_argument("--seed", type=int, default=0)
    run.add_argument("--dim", type=int, default=64)
    run.add_argument("--ffn", type=int, default=128)
    run.add_argument("--heads", type=int, default=4)
    run.add_argument("--kv-heads", type=int, default=None)
    run.add_argument("--self-layers", type=int, default=8)
    run.add_argument("--cross-layers", type=int, default=4)
    run.add_argument("--image-tokens", type=int, default=64)
    run.add_argument("--text-tokens", type=int, default=16)
    run.add_argument("--batch", type=int, default=1)
    run.add_argument("--steps", type=int, default=4)
    run.add_argument("--dtype-bytes", type=int, default=2)
    run.add_argument("--zipf", type=float, default=None,
                     help="Zipf exponent for a concentrated per-feature attention bias")
    run.add_argument("--out")
    run.add_argument("--emit-trace", help="write every cross layer's unpruned attention (sequence 0)")
    run.set_defaults(func=cmd_run)

    cost = sub.add_parser("cost", help="reduction-ratio heatmap as CSV")
    cost.add_argument("--r-grid", type=_floats, default=[round(0.1 * i, 1) for i in range(1, 11)])
    cost.add_argument("--n-grid", type=_ints, default=[16 * 2**i for i in range(9)])
    cost.add_argument("--n-k", type=int, default=1601)
    cost.add_argument("--dim", type=int, default=4096)
    cost.add_argument("--ffn", type=int, default=14336)
    cost.add_argument("--self-layers", type=int, default=32)
    cost.add_argument("--cross-layers", type=int, default=8)
    cost.add_argument("--out")
    cost.set_defaults(func=cmd_cost)

    an = sub.add_parser("analyze", help="sparsity and inter-layer overlap report for a trace")
    an.add_argument("--trace", required=True)
    an.add_argument("--k-ratio", type=float, default=0.25)
    an.add_argument("--out")
    an.set_defaults(func=cmd_analyze)

    ab = sub.add_parser("ablate", help="trimmed vs random vs spatial at matched remaining ratio")
    ab.add_argument("--workloads", type=int, default=50)
    ab.add_argument("--seed", type=int, default=0)
    ab.add_argument("--target-ratio", type=float, default=0.5)
    ab.add_argument("--zipf", type=float, default=1.1, help="0 disables the concentrated pattern")
    ab.add_argument("--dim", type=int, default=32)
    ab.add_argument("--ffn", type=int, default=64)
    ab.add_argument("--heads", type=int, default=4)
    ab.add_argument("--self-layers", type=int, default=2)
    ab.add_argument("--cross-layers", type=int, default=3)
    ab.add_argument("--image-tokens", type=int, default=64)
    ab.add_argument("--text-tokens", type=int, default=8)
    ab.add_argument("--steps", type=int, default=4)
    ab.add_argument("--stride", type=int, default=2)
    ab.add_argument("--out")
    ab.set_defaults(func=cmd_ablate)
    return p


def _validate(parser, args) -> None:
    positive = ["batch", "image_tokens", "text_tokens", "workloads", "stride", "n_k"]
    for name in positive:
        if getattr(args, name, 1) is not None and getattr(args, name, 1) < 1:
            parser.error(f"--{name.replace('_', '-')} must be >= 1")
    if getattr(args, "steps", 0) < 0:
        parser.error("--steps must be >= 0")
    for name in ("k_ratio", "target_ratio"):
        v = getattr(args, name, None)
        if v is not None and not 0 < v <= 1:
            parser.error(f"--{name.replace('_', '-')} must lie in (0, 1]")
    for r in getattr(args, "r_grid", []) or []:
        if not 0 < r <= 1:
            parser.error("--r-grid values must lie in (0, 1]")
    if args.command == "run" and args.method == "none" and args.k_ratio != 1.0:
        parser.error("--k-ratio only applies to pruning methods; drop it or pick --method")


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    _validate(parser, args)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"crossprune: error: {exc}", file=sys.stderr)
        return 2
    except trace_io.TraceFormatError as exc:
        print(f"crossprune: error: {exc}", file=sys.stderr)
        return 2
    except (NumericalError, FloatingPointError) as exc:
        print(f"crossprune: numerical failure: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

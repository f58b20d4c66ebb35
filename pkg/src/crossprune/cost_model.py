"""Analytic FLOPs model for self/cross/pruned-cross decoder blocks.

Units follow the closed-form layer costs the trimming method is evaluated
with: a dense ``(r x k) @ (k x c)`` product contributes ``r*k*c``. Under that
convention a self block costs ``4nd^2 + 2n^2d + 2ndm`` (four projections,
score and value products, two FFN matmuls), which is exactly what the
instrumented :class:`FlopCounter` accumulates from a real forward pass.

Causal masking is not discounted: the score term counts the full ``n x n``
product, as the closed form does.
"""

from __future__ import annotations

import csv
import io
from collections import defaultdict
from dataclasses import dataclass, field
from fractions import Fraction
from numbers import Rational

# Counter categories. Only these are covered by the closed-form terms; norms,
# softmax and activations never go through matmul so they are never counted.
PROJ_Q = "proj_q"
PROJ_KV = "proj_kv"
PROJ_O = "proj_o"
ATTN_SCORE = "attn_score"
ATTN_VALUE = "attn_value"
FFN = "ffn"
COVERED = (PROJ_Q, PROJ_KV, PROJ_O, ATTN_SCORE, ATTN_VALUE, FFN)
KV_DEPENDENT = (PROJ_KV, ATTN_SCORE, ATTN_VALUE)


class FlopCounter:
    """Explicit MAC accumulator owned by a single run.

    Tags are ``(phase, layer, kind, category)`` tuples; ``None`` tags are
    tallied under ``"untagged"`` so nothing is silently dropped.
    """

    def __init__(self):
        self.records: dict[tuple, int] = defaultdict(int)

    def add(self, tag, macs: int) -> None:
        self.records[tag if tag is not None else ("untagged",)] += int(macs)

    def total(self, phase=None, layer=None, kind=None, categories=None) -> int:
        """Sum MACs matching every given filter; ``phase="decode"`` spans all steps."""
        out = 0
        for tag, n in self.records.items():
            if len(tag) != 4:
                continue
            p, l, k, c = tag
            if phase is not None and p != phase and not (phase == "decode" and p.startswith("decode")):
                continue
            if layer is not None and l != layer:
                continue
            if kind is not None and k != kind:
                continue
            if categories is not None and c not in categories:
                continue
            out += n
        return out

    def per_layer(self, phase: str) -> dict[int, int]:
        layers: dict[int, int] = defaultdict(int)
        for tag, n in self.records.items():
            if len(tag) == 4 and tag[0] == phase:
                layers[tag[1]] += n
        return dict(sorted(layers.items()))

    def merge(self, other: "FlopCounter") -> None:
        for tag, n in other.records.items():
            self.records[tag] += n


def _num(x):
    """Collapse an exact Fraction to int when integral."""
    if isinstance(x, Fraction) and x.denominator == 1:
        return x.numerator
    return x


def flops_self(n, d, m):
    return 4 * n * d * d + 2 * n * n * d + 2 * n * d * m


def flops_cross(n, n_k, d, m):
    return 2 * n * d * d + 2 * n_k * d * d + 2 * n * n_k * d + 2 * n * d * m


def flops_prune(n, n_k, R, d, m):
    """Cross block cost when only ``n_k * R`` image features remain.

    Pass ``R`` as a :class:`~fractions.Fraction` (e.g. ``Fraction(kept, n_k)``)
    to get exact integer counts; floats give a fractional analytic sweep.
    """
    if not 0 < R <= 1:
        raise ValueError(f"R must lie in (0, 1], got {R}")
    kept = n_k * R
    return _num(2 * n * d * d + 2 * kept * d * d + 2 * n * kept * d + 2 * n * d * m)


def flops_self_decode(n_ctx, d, m):
    """One new query against ``n_ctx`` cached self positions (incl. itself)."""
    return 4 * d * d + 2 * n_ctx * d + 2 * d * m


def flops_cross_decode(n_kv, d, m):
    """One new query against ``n_kv`` cached cross positions; no K/V projection."""
    return 2 * d * d + 2 * n_kv * d + 2 * d * m


def reduction_ratio(S, C, n, n_k, R, d, m) -> float:
    """Fractional FLOPs saved by pruning after the first cross block.

    The first cross block always runs at full cost. Evaluated in exact
    rational arithmetic so ``R == 1`` yields exactly ``0.0``.
    """
    R = R if isinstance(R, Rational) else Fraction(R)
    fs = flops_self(n, d, m)
    fc = flops_cross(n, n_k, d, m)
    fp = Fraction(flops_prune(n, n_k, R, d, m))
    full = S * fs + C * fc
    if full == 0:
        return 0.0
    return float(1 - (S * fs + fc + (C - 1) * fp) / Fraction(full))


def heatmap(R_grid, n_grid, *, S, C, n_k, d, m) -> list[dict]:
    """Reduction ratio over a budget x prompt-length grid, R outer, n inner."""
    return [
        {"R": R, "n": n, "reduction_ratio": reduction_ratio(S, C, n, n_k, R, d, m)}
        for R in R_grid
        for n in n_grid
    ]


def heatmap_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["R", "n", "reduction_ratio"])
    for row in rows:
        writer.writerow([repr(float(row["R"])), row["n"], repr(row["reduction_ratio"])])
    return buf.getvalue()


@dataclass
class CostReport:
    analytic: dict
    measured: dict
    params: dict
    counter: FlopCounter | None = field(default=None, repr=False)
    selection: object = field(default=None, repr=False)
    state: object = field(default=None, repr=False)
    timing: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"analytic": self.analytic, "measured": self.measured, "params": self.params}


def build_report(counter: FlopCounter, *, n, n_k, kept, d, m, S, C, self_layers, cross_layers,
                 decode_contexts=()) -> CostReport:
    """Assemble analytic and measured figures for one prefill (+ decode) run.

    ``self_layers``/``cross_layers`` are block indices in execution order;
    ``decode_contexts`` lists the self-cache length seen by each decode step.
    """
    R = Fraction(kept, n_k)
    fs, fc, fp = flops_self(n, d, m), flops_cross(n, n_k, d, m), flops_prune(n, n_k, R, d, m)
    decode = sum(
        S * flops_self_decode(ctx, d, m) + C * flops_cross_decode(kept, d, m)
        for ctx in decode_contexts
    )
    analytic = {
        "flops_self": fs,
        "flops_cross": fc,
        "flops_prune": fp,
        "prefill_total": S * fs + fc + (C - 1) * fp,
        "prefill_unpruned": S * fs + C * fc,
        "decode_total": decode,
        "reduction_ratio": reduction_ratio(S, C, n, n_k, R, d, m),
    }
    measured = {
        "prefill_per_layer": {
            str(k): v for k, v in counter.per_layer("prefill").items()
        },
        "prefill_total": counter.total(phase="prefill", categories=COVERED),
        "prefill_cross": counter.total(phase="prefill", kind="cross", categories=COVERED),
        "prefill_cross_kv": counter.total(phase="prefill", kind="cross", categories=KV_DEPENDENT),
        "decode_total": counter.total(phase="decode", categories=COVERED),
    }
    params = {
        "n": n, "n_k": n_k, "kept": kept, "R": kept / n_k, "d": d, "m": m, "S": S, "C": C,
        "self_layers": list(self_layers), "cross_layers": list(cross_layers),
        "decode_contexts": list(decode_contexts),
    }
    return CostReport(analytic=analytic, measured=measured, params=params, counter=counter)


@dataclass
class Verdict:
    ok: bool
    expected_total: int
    measured_total: int
    mismatches: list = field(default_factory=list)


def verify_counter(report: CostReport) -> Verdict:
    """Check instrumented prefill MACs against the closed form, layer by layer."""
    if report.counter is None:
        raise ValueError("report carries no counter")
    p = report.params
    n, n_k, kept, d, m = p["n"], p["n_k"], p["kept"], p["d"], p["m"]
    R = Fraction(kept, n_k)
    counter = report.counter
    mismatches = []
    expected_layers = {}
    for layer in p["self_layers"]:
        expected_layers[layer] = flops_self(n, d, m)
    for i, layer in enumerate(p["cross_layers"]):
        expected_layers[layer] = flops_cross(n, n_k, d, m) if i == 0 else flops_prune(n, n_k, R, d, m)
    for layer, want in expected_layers.items():
        got = counter.total(phase="prefill", layer=layer, categories=COVERED)
        if got != want:
            mismatches.append({"layer": layer, "expected": want, "measured": got})
    for i, ctx in enumerate(p.get("decode_contexts", [])):
        for layer in p["self_layers"]:
            want = flops_self_decode(ctx, d, m)
            got = counter.total(phase=f"decode{i}", layer=layer, categories=COVERED)
            if got != want:
                mismatches.append({"step": i, "layer": layer, "expected": want, "measured": got})
        for layer in p["cross_layers"]:
            want = flops_cross_decode(kept, d, m)
            got = counter.total(phase=f"decode{i}", layer=layer, categories=COVERED)
            if got != want:
                mismatches.append({"step": i, "layer": layer, "expected": want, "measured": got})
    expected_total = sum(expected_layers.values())
    measured_total = counter.total(phase="prefill", categories=COVERED)
    ok = not mismatches and expected_total == measured_total
    return Verdict(ok, expected_total, measured_total, mismatches)

"""Diagnostics for cross-attention sparsity and inter-layer stability."""

from __future__ import annotations

import json
import math

import numpy as np

from crossprune.trace_io import AttnTrace
from crossprune.trimming import trim

REPORT_SCHEMA_VERSION = 1
CONCENTRATION_QS = (0.05, 0.1, 0.25)


def aggregate_layer(attn: np.ndarray) -> np.ndarray:
    """Attention mass per image feature, summed over heads and queries."""
    if attn.ndim != 3:
        raise ValueError(f"expected (H, m, L) attention, got {attn.shape}")
    v = np.zeros(attn.shape[2], dtype=np.float64)
    for h in range(attn.shape[0]):
        for j in range(attn.shape[1]):
            v += attn[h, j]
    return v


def concentration(v: np.ndarray, q: float) -> float:
    """Share of total mass held by the top ``ceil(q*|L|)`` entries."""
    if not 0 < q <= 1:
        raise ValueError(f"q must lie in (0, 1], got {q}")
    v = np.asarray(v, dtype=np.float64)
    total = v.sum()
    if total <= 0:
        raise ValueError("vector has no positive mass")
    top = max(1, math.ceil(q * v.size))
    return float(np.sort(v)[::-1][:top].sum() / total)


def jaccard(a, b) -> float:
    a, b = set(a), set(b)
    if not a and not b:
        return 1.0
    return len(a & b) / len(a | b)


def interlayer_overlap(layer_a: np.ndarray, layer_b: np.ndarray, k_ratio: float) -> float:
    return jaccard(trim(layer_a, k_ratio).kept, trim(layer_b, k_ratio).kept)


def analyze_trace(trace: AttnTrace, k_ratio: float = 0.25, qs=CONCENTRATION_QS) -> dict:
    selections = [trim(a, k_ratio) for a in trace.layers]
    layers = []
    for i, a in enumerate(trace.layers):
        v = aggregate_layer(a)
        layers.append({
            "layer": i,
            "aggregate": v.tolist(),
            "concentration": {str(q): concentration(v, q) for q in qs},
            "kept": list(selections[i].kept),
            "remaining_ratio": selections[i].remaining_ratio,
        })
    n = len(selections)
    overlap = [[jaccard(selections[i].kept, selections[j].kept) for j in range(n)] for i in range(n)]
    h, m, L = trace.dims
    return {
        "schema_version": REPORT_SCHEMA_VERSION,
        "dims": {"heads": h, "queries": m, "features": L},
        "k_ratio": k_ratio,
        "meta": trace.meta,
        "layers": layers,
        "overlap": overlap,
    }


def report_json(report: dict) -> str:
    return json.dumps(report, sort_keys=True, indent=2)

"""Trimmed vs random vs spatial selection at a matched remaining ratio.

The score is output divergence: the L2 distance between a method's hidden
states (prefill plus pseudo-decoded steps) and the unpruned run. It is a
toy-scale proxy for task quality, not a benchmark score.
"""

from __future__ import annotations

from dataclasses import replace

import numpy as np

from crossprune.model import ModelConfig, PruneConfig, build_model, generate, make_inputs, prefill
from crossprune.tensor_core import splitmix64_mix
from crossprune.trimming import Selection, baseline_random, baseline_spatial, trim


def _stack(hiddens) -> np.ndarray:
    return np.concatenate(hiddens, axis=0).astype(np.float64)


def divergence(hiddens, reference) -> float:
    return float(np.linalg.norm(_stack(hiddens) - _stack(reference)))


def matched_trim(first_attn: np.ndarray, target_ratio: float) -> Selection:
    """Trimmed selection with the most features whose remaining ratio does
    not exceed ``target_ratio`` (the union grows monotonically with k)."""
    L = first_attn.shape[2]
    best = trim(first_attn, 1 / L)
    for k in range(2, L + 1):
        sel = trim(first_attn, k / L)
        if sel.remaining_ratio > target_ratio:
            break
        best = sel
    return best


def run_workload(cfg: ModelConfig, n_text: int, n_img: int, seed: int, *, target_ratio: float = 0.5,
                 zipf: float | None = 1.1, steps: int = 4, stride: int = 2) -> dict:
    model = build_model(cfg)
    text, img = make_inputs(cfg, n_text, n_img, seed, zipf=zipf)
    ref, _ = generate(model, text, img, PruneConfig(), steps=steps)
    first_attn = prefill(model, text, img).first_layer_attn

    trimmed = matched_trim(first_attn, target_ratio)
    kept = len(trimmed.kept)
    selections = {
        "trimmed": trimmed,
        "random": baseline_random(n_img, kept / n_img, splitmix64_mix(seed ^ 0x5EED)),
        "spatial": baseline_spatial(n_img, target_ratio, stride),
    }
    row = {"seed": seed, "n_features": n_img}
    for name, sel in selections.items():
        hiddens, _ = generate(model, text, img, PruneConfig(), steps=steps, selection=sel)
        row[name] = {"kept": len(sel.kept), "remaining_ratio": sel.remaining_ratio,
                     "divergence": divergence(hiddens, ref)}
    return row


def run_ablation(n_workloads: int = 50, seed: int = 0, *, cfg: ModelConfig | None = None, n_text: int = 8,
                 n_img: int = 64, target_ratio: float = 0.5, zipf: float | None = 1.1,
                 steps: int = 4, stride: int = 2) -> dict:
    rows = []
    for w in range(n_workloads):
        wseed = splitmix64_mix(seed ^ (w + 1))
        wcfg = cfg or ModelConfig(d=32, m=64, n_heads=4, n_kv_heads=4, S=2, C=3)
        wcfg = replace(wcfg, seed=wseed)
        rows.append(run_workload(wcfg, n_text, n_img, wseed, target_ratio=target_ratio,
                                 zipf=zipf, steps=steps, stride=stride))
    wins = sum(r["trimmed"]["divergence"] <= r["random"]["divergence"] for r in rows)
    summary = {
        name: {
            "mean_divergence": float(np.mean([r[name]["divergence"] for r in rows])),
            "mean_remaining_ratio": float(np.mean([r[name]["remaining_ratio"] for r in rows])),
        }
        for name in ("trimmed", "random", "spatial")
    }
    summary["trimmed_le_random_fraction"] = wins / n_workloads if n_workloads else 0.0
    return {"rows": rows, "summary": summary,
            "params": {"n_workloads": n_workloads, "seed": seed, "n_text": n_text, "n_img": n_img,
                       "target_ratio": target_ratio, "zipf": zipf, "steps": steps, "stride": stride}}

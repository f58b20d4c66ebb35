"""Head-wise top-k trimming of image features, plus random/spatial baselines.

Importance of image feature ``i`` for head ``h`` is the attention it receives
summed over every text query of the first cross-attention block. Each head
keeps its own top-k features and the union over heads is retained.

Rounding: ``k = max(1, floor(k_ratio * |L|))``. Ties break toward the lower
feature index, so selections are reproducible across platforms.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from crossprune.tensor_core import seeded_tensor, softmax_rows, splitmix64_stream

METHODS = ("none", "trimmed", "random", "spatial")


class SelectionEmptyError(RuntimeError):
    """No image feature survived selection."""


@dataclass(frozen=True)
class Selection:
    kept: tuple[int, ...]
    n_features: int
    k_ratio: float
    method: str = "trimmed"
    per_head: tuple[tuple[int, ...], ...] = ()
    k: int | None = None

    @property
    def remaining_ratio(self) -> float:
        return len(self.kept) / self.n_features

    def indices(self) -> np.ndarray:
        return np.asarray(self.kept, dtype=np.intp)

    def is_full(self) -> bool:
        return len(self.kept) == self.n_features

    def to_dict(self) -> dict:
        return {
            "n_features": self.n_features,
            "k_ratio": self.k_ratio,
            "method": self.method,
            "kept": list(self.kept),
            "per_head": [list(t) for t in self.per_head],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, doc: dict) -> "Selection":
        per_head = tuple(tuple(int(i) for i in t) for t in doc.get("per_head", []))
        return cls(
            kept=tuple(int(i) for i in doc["kept"]),
            n_features=int(doc["n_features"]),
            k_ratio=float(doc["k_ratio"]),
            method=doc.get("method", "trimmed"),
            per_head=per_head,
            k=len(per_head[0]) if per_head else None,
        )


def full_selection(n_features: int) -> Selection:
    return Selection(tuple(range(n_features)), n_features, 1.0, method="none")


def _check_ratio(k_ratio: float) -> None:
    if not 0 < k_ratio <= 1:
        raise ValueError(f"k_ratio must lie in (0, 1], got {k_ratio}")


def topk_count(k_ratio: float, n_features: int) -> int:
    _check_ratio(k_ratio)
    return max(1, math.floor(k_ratio * n_features))


def accumulate_importance(attn: np.ndarray) -> np.ndarray:
    """Sum attention over queries: ``(H, m, L) -> (H, L)``. No normalisation."""
    if attn.ndim != 3:
        raise ValueError(f"attention tensor must be (heads, queries, features), got {attn.shape}")
    # sequential over queries so the result is independent of numpy's
    # pairwise-summation blocking
    scores = np.zeros((attn.shape[0], attn.shape[2]), dtype=np.float64)
    for j in range(attn.shape[1]):
        scores += attn[:, j, :]
    return scores


def select_topk_per_head(scores: np.ndarray, k_ratio: float) -> list[tuple[int, ...]]:
    if scores.ndim != 2:
        raise ValueError(f"importance matrix must be (heads, features), got {scores.shape}")
    k = topk_count(k_ratio, scores.shape[1])
    out = []
    for row in scores:
        # stable sort on -score keeps lower indices first among ties
        order = np.argsort(-row, kind="stable")[:k]
        out.append(tuple(sorted(int(i) for i in order)))
    return out


def union_selection(per_head, n_features: int, k_ratio: float = 1.0, method: str = "trimmed") -> Selection:
    kept = set()
    for t in per_head:
        for i in t:
            if not 0 <= i < n_features:
                raise ValueError(f"index {i} outside [0, {n_features})")
            kept.add(int(i))
    if not kept:
        raise SelectionEmptyError("union of per-head selections is empty")
    per_head = tuple(tuple(t) for t in per_head)
    return Selection(
        kept=tuple(sorted(kept)),
        n_features=n_features,
        k_ratio=k_ratio,
        method=method,
        per_head=per_head,
        k=len(per_head[0]) if per_head else None,
    )


def trim(attn: np.ndarray, k_ratio: float) -> Selection:
    scores = accumulate_importance(attn)
    per_head = select_topk_per_head(scores, k_ratio)
    return union_selection(per_head, scores.shape[1], k_ratio)


def trim_scores(scores: np.ndarray, k_ratio: float) -> Selection:
    """Same as :func:`trim` but starting from an importance matrix."""
    return union_selection(select_topk_per_head(scores, k_ratio), scores.shape[1], k_ratio)


def _round_half_up(x: float) -> int:
    return math.floor(x + 0.5)


def baseline_random(n_features: int, target_ratio: float, seed: int) -> Selection:
    """Uniform sample of ``round(target_ratio * |L|)`` indices (at least one).

    Fisher-Yates over ``range(n_features)`` driven by a splitmix64 stream; the
    first ``count`` shuffled positions are kept.
    """
    _check_ratio(target_ratio)
    count = max(1, _round_half_up(target_ratio * n_features))
    perm = list(range(n_features))
    draws = splitmix64_stream(seed, n_features)
    for i in range(n_features - 1, 0, -1):
        j = int(draws[n_features - 1 - i] % np.uint64(i + 1))
        perm[i], perm[j] = perm[j], perm[i]
    return Selection(tuple(sorted(perm[:count])), n_features, target_ratio, method="random")


def baseline_spatial(n_features: int, target_ratio: float, stride: int = 2) -> Selection:
    """Fixed-pattern sampling: within each block of ``stride`` consecutive
    indices keep the first ``max(1, round(target_ratio * stride))`` residues.

    With ``stride=2`` and ratio 0.5 this keeps every alternate index.
    """
    _check_ratio(target_ratio)
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    per_block = min(stride, max(1, _round_half_up(target_ratio * stride)))
    kept = tuple(i for i in range(n_features) if i % stride < per_block)
    return Selection(kept, n_features, target_ratio, method="spatial")


def zipf_column_logits(n_features: int, seed: int, exponent: float = 1.1) -> np.ndarray:
    """Per-feature logit bias whose softmax mass follows a Zipf law over a
    seeded random ranking of the features (a "vertical" attention pattern)."""
    u = splitmix64_stream(seed, n_features)
    ranks = np.argsort(u, kind="stable")
    position = np.empty(n_features, dtype=np.int64)
    position[ranks] = np.arange(1, n_features + 1)
    return (-exponent * np.log(position)).astype(np.float32)


def synthetic_attention(n_heads: int, n_queries: int, n_features: int, seed: int,
                        exponent: float = 1.1, noise: float = 1.0) -> np.ndarray:
    """Row-stochastic ``(H, m, L)`` attention with a shared Zipfian column bias
    plus per-(head, query) uniform noise on the logits."""
    bias = zipf_column_logits(n_features, seed ^ 0xA5A5, exponent)
    noise_t = seeded_tensor((n_heads * n_queries, n_features), seed, noise)
    w = softmax_rows(noise_t + bias[None, :])
    return w.reshape(n_heads, n_queries, n_features)

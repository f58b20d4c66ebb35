"""KV cache state and byte accounting.

Only K and V tensors are counted: no allocator overhead, no paging slack.
Self-attention caches grow by one position per decoded token; cross-attention
caches are written once at prefill (already trimmed) and never change.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np


class StateError(RuntimeError):
    """Cache state does not belong to the model it is used with."""


@dataclass
class KvCacheState:
    """Per-sequence caches. Arrays are ``(n_kv_heads, length, head_dim)``."""

    self_k: list[np.ndarray]
    self_v: list[np.ndarray]
    cross_k: list[np.ndarray]
    cross_v: list[np.ndarray]
    cross_bias: np.ndarray | None
    selection: object
    config_key: tuple
    dtype_bytes: int = 2
    batch: int = 1
    steps: int = 0
    history: list = field(default_factory=list)

    @property
    def n_cur(self) -> int:
        return self.self_k[0].shape[1] if self.self_k else 0

    @property
    def n_kept(self) -> int:
        return self.cross_k[0].shape[1] if self.cross_k else 0

    def self_bytes(self) -> int:
        return self.dtype_bytes * sum(a.size for a in self.self_k + self.self_v)

    def cross_bytes(self) -> int:
        return self.dtype_bytes * sum(a.size for a in self.cross_k + self.cross_v)

    def check_consistent(self) -> None:
        lens = {a.shape[1] for a in self.self_k + self.self_v}
        if len(lens) > 1:
            raise StateError(f"self layers disagree on length: {sorted(lens)}")
        lens = {a.shape[1] for a in self.cross_k + self.cross_v}
        if len(lens) > 1:
            raise StateError(f"cross layers disagree on length: {sorted(lens)}")


def live_bytes(states) -> tuple[int, int]:
    """Summed (self, cross) bytes over the sequences of a batch."""
    return (sum(s.self_bytes() for s in states), sum(s.cross_bytes() for s in states))


def cache_bytes(cfg, batch: int, n_text: int, n_img_kept: int) -> tuple[int, int]:
    head_dim = cfg.d // cfg.n_heads
    per_pos = 2 * batch * head_dim * cfg.n_kv_heads * cfg.dtype_bytes
    return cfg.S * n_text * per_pos, cfg.C * n_img_kept * per_pos


def crossover_tokens(cfg, n_img_kept: int) -> int:
    """Smallest text length whose self cache is at least the cross cache.

    Layers share per-position width, so this reduces to ``ceil(C*n_img/S)``.
    """
    if cfg.S == 0:
        raise ValueError("no self-attention layers: self cache never catches up")
    return math.ceil(cfg.C * n_img_kept / cfg.S)


def reduction_bytes(cfg, batch: int, n_img: int, remaining_ratio: float) -> float:
    """Cross-cache bytes saved when ``remaining_ratio`` of the features remain.

    The kept count may be fractional here; pass a ratio derived from an
    actual selection to get an integral saving.
    """
    if not 0 <= remaining_ratio <= 1:
        raise ValueError(f"remaining_ratio must lie in [0, 1], got {remaining_ratio}")
    _, full = cache_bytes(cfg, batch, 0, n_img)
    return full * (1 - remaining_ratio)


def memory_curve_csv(cfg, batches, n_texts, n_img_kept: int) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["batch", "n_text", "n_img_kept", "self_bytes", "cross_bytes"])
    for b in batches:
        for n in n_texts:
            s, c = cache_bytes(cfg, b, n, n_img_kept)
            w.writerow([b, n, n_img_kept, s, c])
    return buf.getvalue()

"""Dense f32 kernels used by the toy decoder.

Tensors are plain ``numpy.ndarray`` objects with dtype float32. Shapes are
always explicit: nothing here broadcasts, so every multiply-accumulate that
the cost model cares about goes through :func:`matmul` and can be counted.
"""

from __future__ import annotations

import math

import numpy as np

from crossprune.cost_model import FlopCounter

GOLDEN_GAMMA = 0x9E3779B97F4A7C15
_MASK64 = (1 << 64) - 1


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


def splitmix64_mix(z: int) -> int:
    """splitmix64 finalizer on a python int (wraps at 64 bits)."""
    z &= _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def splitmix64_stream(seed: int, count: int) -> np.ndarray:
    """First ``count`` outputs of a splitmix64 generator seeded with ``seed``."""
    idx = np.arange(1, count + 1, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = np.uint64(seed & _MASK64) + idx * np.uint64(GOLDEN_GAMMA)
        z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


def unit_floats(seed: int, count: int) -> np.ndarray:
    """Uniform float64 samples in [0, 1) from the top 53 bits of the stream."""
    bits = splitmix64_stream(seed, count) >> np.uint64(11)
    return bits.astype(np.float64) * (1.0 / (1 << 53))


def seeded_tensor(shape, seed: int, scale: float) -> np.ndarray:
    """Uniform(-scale, scale) f32 tensor, bit-reproducible for given arguments."""
    if scale <= 0:
        raise ValueError(f"scale must be positive, got {scale}")
    shape = tuple(int(s) for s in shape)
    if any(s < 1 for s in shape):
        raise DimensionError(f"every extent must be >= 1, got {shape}")
    u = unit_floats(seed, math.prod(shape))
    return ((2.0 * u - 1.0) * scale).astype(np.float32).reshape(shape)


def _check_2d(name: str, t: np.ndarray) -> None:
    if t.ndim != 2:
        raise DimensionError(f"{name} must be 2-D, got shape {t.shape}")


def matmul(a: np.ndarray, b: np.ndarray, counter: FlopCounter | None = None, tag=None) -> np.ndarray:
    """``a @ b`` for 2-D f32 operands, charging r*k*c MACs to ``counter``."""
    _check_2d("a", a)
    _check_2d("b", b)
    r, k = a.shape
    k2, c = b.shape
    if k != k2:
        raise DimensionError(f"matmul inner extents differ: {a.shape} x {b.shape}")
    if counter is not None:
        counter.add(tag, r * k * c)
    return np.matmul(a, b, dtype=np.float32)


def softmax_rows(t: np.ndarray) -> np.ndarray:
    _check_2d("t", t)
    shifted = t - t.max(axis=1, keepdims=True)
    e = np.exp(shifted, dtype=np.float32)
    return (e / e.sum(axis=1, keepdims=True)).astype(np.float32)


def attention(
    q: np.ndarray,
    k: np.ndarray,
    v: np.ndarray,
    causal: bool = False,
    bias: np.ndarray | None = None,
    counter: FlopCounter | None = None,
    tags: tuple | None = None,
):
    """Single-head scaled dot-product attention.

    Args:
        q: (n_q, d_h) queries.
        k, v: (n_kv, d_h) keys and values.
        causal: mask key ``j`` for query ``i`` when ``j > i + (n_kv - n_q)``,
            i.e. queries are the last ``n_q`` positions of the key sequence.
        bias: optional (n_kv,) additive logit bias shared by every query.
        counter: MAC accumulator; the score and value matmuls are charged to
            ``tags[0]`` and ``tags[1]``.

    Returns:
        ``(out, weights)`` with shapes (n_q, d_h) and (n_q, n_kv).
    """
    for name, t in (("q", q), ("k", k), ("v", v)):
        _check_2d(name, t)
    if not (q.shape[1] == k.shape[1] == v.shape[1]):
        raise DimensionError(f"head dims differ: q{q.shape} k{k.shape} v{v.shape}")
    if k.shape[0] != v.shape[0]:
        raise DimensionError(f"k and v lengths differ: k{k.shape} v{v.shape}")
    n_q, d_h = q.shape
    n_kv = k.shape[0]
    if causal and n_q > n_kv:
        raise DimensionError(f"causal attention needs n_q <= n_kv, got {n_q} > {n_kv}")
    score_tag, value_tag = tags if tags is not None else (None, None)

    logits = matmul(q, np.ascontiguousarray(k.T), counter, score_tag)
    logits *= np.float32(1.0 / math.sqrt(d_h))
    if bias is not None:
        if bias.shape != (n_kv,):
            raise DimensionError(f"bias shape {bias.shape} does not match {n_kv} keys")
        logits += bias.astype(np.float32)[None, :]
    if causal:
        offset = n_kv - n_q
        rows = np.arange(n_q)[:, None]
        cols = np.arange(n_kv)[None, :]
        logits = np.where(cols > rows + offset, np.float32(-np.inf), logits)
    weights = softmax_rows(logits)
    out = matmul(weights, v, counter, value_tag)
    return out, weights


def rms_norm(x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    ms = np.mean(x.astype(np.float32) ** 2, axis=-1, keepdims=True)
    return (x / np.sqrt(ms + np.float32(eps))).astype(np.float32)


def silu(x: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        return (x / (1.0 + np.exp(-x))).astype(np.float32)

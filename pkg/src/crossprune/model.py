"""Toy decoder with interleaved self- and cross-attention blocks.

Block internals (a plain, documented choice):

* pre-attention RMS norm, multi-head attention, residual add;
* pre-FFN RMS norm, ``silu(h @ w_up) @ w_down``, residual add.

Self blocks are causal over text. Cross blocks take queries from text and
keys/values from image features, with no mask. Image features are trimmed in
the first cross block: it attends over all of them, its attention weights
drive the selection, and only the selected rows go into its KV cache. Later
cross blocks project just the selected features.

Weights are drawn with :func:`~crossprune.tensor_core.seeded_tensor`; the seed
for a weight is ``splitmix64_mix(cfg.seed ^ (layer << 8) ^ role_tag)``.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from crossprune import cost_model as cm
from crossprune.cost_model import FlopCounter, build_report
from crossprune.kv_cache import KvCacheState, StateError
from crossprune.tensor_core import (
    DimensionError,
    attention,
    matmul,
    rms_norm,
    seeded_tensor,
    silu,
    splitmix64_mix,
)
from crossprune.trimming import (
    METHODS,
    Selection,
    SelectionEmptyError,
    baseline_random,
    baseline_spatial,
    full_selection,
    trim,
    zipf_column_logits,
)

ROLE_TAGS = {"wq": 1, "wk": 2, "wv": 3, "wo": 4, "w_up": 5, "w_down": 6}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    d: int = 64
    m: int = 128
    n_heads: int = 4
    n_kv_heads: int = 4
    S: int = 8
    C: int = 4
    cross_positions: tuple[int, ...] | None = None
    seed: int = 0
    dtype_bytes: int = 2

    def __post_init__(self):
        if self.C < 1:
            raise ConfigError("C must be >= 1: trimming needs a first cross block")
        if self.S < 0:
            raise ConfigError("S must be >= 0")
        if min(self.d, self.m, self.n_heads, self.n_kv_heads, self.dtype_bytes) < 1:
            raise ConfigError("d, m, n_heads, n_kv_heads and dtype_bytes must be positive")
        if self.n_heads % self.n_kv_heads:
            raise ConfigError(
                f"n_heads ({self.n_heads}) must be divisible by n_kv_heads ({self.n_kv_heads})"
            )
        if self.d % self.n_heads:
            raise ConfigError(f"d ({self.d}) must be divisible by n_heads ({self.n_heads})")
        total = self.S + self.C
        if self.cross_positions is None:
            # evenly spaced, last block is always cross: S=8, C=4 -> 2, 5, 8, 11
            pos = tuple((j + 1) * total // self.C - 1 for j in range(self.C))
            object.__setattr__(self, "cross_positions", pos)
        else:
            object.__setattr__(self, "cross_positions", tuple(int(p) for p in self.cross_positions))
        pos = self.cross_positions
        if len(pos) != self.C:
            raise ConfigError(f"expected {self.C} cross positions, got {len(pos)}")
        if any(b <= a for a, b in zip(pos, pos[1:])):
            raise ConfigError(f"cross positions must be strictly increasing: {pos}")
        if pos and (pos[0] < 0 or pos[-1] >= total):
            raise ConfigError(f"cross positions must lie in [0, {total}): {pos}")

    @property
    def head_dim(self) -> int:
        return self.d // self.n_heads

    @property
    def n_blocks(self) -> int:
        return self.S + self.C

    def block_kinds(self) -> list[str]:
        cross = set(self.cross_positions)
        return ["cross" if i in cross else "self" for i in range(self.n_blocks)]


@dataclass(frozen=True)
class ImageFeatures:
    feats: np.ndarray
    bias: np.ndarray | None = None

    def __post_init__(self):
        if self.feats.ndim != 2 or self.feats.shape[0] < 1:
            raise DimensionError(f"image features must be (n_k >= 1, d), got {self.feats.shape}")
        if self.bias is not None and self.bias.shape != (self.feats.shape[0],):
            raise DimensionError(f"bias shape {self.bias.shape} != ({self.feats.shape[0]},)")

    @property
    def n_k(self) -> int:
        return self.feats.shape[0]


@dataclass(frozen=True)
class PruneConfig:
    method: str = "none"
    k_ratio: float = 1.0
    seed: int = 0
    stride: int = 2

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if not 0 < self.k_ratio <= 1:
            raise ConfigError(f"k_ratio must lie in (0, 1], got {self.k_ratio}")
        if self.stride < 1:
            raise ConfigError(f"stride must be >= 1, got {self.stride}")


@dataclass
class LayerWeights:
    kind: str
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    w_up: np.ndarray
    w_down: np.ndarray


@dataclass(frozen=True)
class Model:
    cfg: ModelConfig
    layers: tuple[LayerWeights, ...]

    @property
    def self_layers(self) -> list[int]:
        return [i for i, lw in enumerate(self.layers) if lw.kind == "self"]

    @property
    def cross_layers(self) -> list[int]:
        return [i for i, lw in enumerate(self.layers) if lw.kind == "cross"]


@dataclass
class ForwardResult:
    hidden: np.ndarray
    selection: Selection
    caches: KvCacheState
    first_layer_attn: np.ndarray
    cross_attn: list = field(default_factory=list)


def weight_seed(seed: int, layer: int, role: str) -> int:
    return splitmix64_mix(seed ^ (layer << 8) ^ ROLE_TAGS[role])


def build_model(cfg: ModelConfig) -> Model:
    d, m, kv_width = cfg.d, cfg.m, cfg.n_kv_heads * cfg.head_dim
    shapes = {
        "wq": (d, d), "wk": (d, kv_width), "wv": (d, kv_width), "wo": (d, d),
        "w_up": (d, m), "w_down": (m, d),
    }
    layers = []
    for layer, kind in enumerate(cfg.block_kinds()):
        w = {
            role: seeded_tensor(shape, weight_seed(cfg.seed, layer, role), 1.0 / math.sqrt(shape[0]))
            for role, shape in shapes.items()
        }
        layers.append(LayerWeights(kind=kind, **w))
    return Model(cfg, tuple(layers))


def make_inputs(cfg: ModelConfig, n_text: int, n_img: int, seed: int, zipf: float | None = None):
    """Seeded synthetic text embeddings and image features.

    ``zipf`` (an exponent) adds a Zipfian per-feature logit bias so cross
    attention concentrates on a fixed subset of columns in every layer.
    """
    text = seeded_tensor((n_text, cfg.d), splitmix64_mix(seed ^ 0x7E47), 1.0)
    feats = seeded_tensor((n_img, cfg.d), splitmix64_mix(seed ^ 0x1A6E), 1.0)
    bias = zipf_column_logits(n_img, splitmix64_mix(seed ^ 0xB1A5), zipf) if zipf else None
    return text, ImageFeatures(feats, bias)


def _heads(x: np.ndarray, n_heads: int) -> np.ndarray:
    """(n, n_heads*hd) -> (n_heads, n, hd)."""
    n = x.shape[0]
    return np.ascontiguousarray(x.reshape(n, n_heads, -1).transpose(1, 0, 2))


def _attend_heads(cfg, q, k, v, causal, bias, counter, phase, layer, kind):
    """Run every query head against its KV group; returns (out (n, d), weights (H, n, n_kv))."""
    group = cfg.n_heads // cfg.n_kv_heads
    tags = ((phase, layer, kind, cm.ATTN_SCORE), (phase, layer, kind, cm.ATTN_VALUE))
    outs, weights = [], []
    for h in range(cfg.n_heads):
        g = h // group
        o, w = attention(q[h], k[g], v[g], causal=causal, bias=bias, counter=counter, tags=tags)
        outs.append(o)
        weights.append(w)
    out = np.concatenate(outs, axis=1)
    return out, np.stack(weights)


def _ffn(lw, x, counter, phase, layer, kind):
    tag = (phase, layer, kind, cm.FFN)
    h = rms_norm(x)
    return x + matmul(silu(matmul(h, lw.w_up, counter, tag)), lw.w_down, counter, tag)


def _project_q(lw, h, cfg, counter, phase, layer, kind):
    return _heads(matmul(h, lw.wq, counter, (phase, layer, kind, cm.PROJ_Q)), cfg.n_heads)


def _project_kv(lw, src, cfg, counter, phase, layer, kind):
    tag = (phase, layer, kind, cm.PROJ_KV)
    k = _heads(matmul(src, lw.wk, counter, tag), cfg.n_kv_heads)
    v = _heads(matmul(src, lw.wv, counter, tag), cfg.n_kv_heads)
    return k, v


def _select(prune: PruneConfig, weights: np.ndarray, n_k: int) -> Selection:
    if prune.method == "none":
        return full_selection(n_k)
    if prune.method == "trimmed":
        return trim(weights, prune.k_ratio)
    if prune.method == "random":
        return baseline_random(n_k, prune.k_ratio, prune.seed)
    return baseline_spatial(n_k, prune.k_ratio, prune.stride)


def prefill(model: Model, text_embeds: np.ndarray, img: ImageFeatures, prune: PruneConfig = PruneConfig(),
            counter: FlopCounter | None = None, capture_attn: bool = False,
            selection: Selection | None = None) -> ForwardResult:
    """Full-prompt forward pass that builds the caches.

    ``selection`` overrides the one derived from ``prune`` (used to replay a
    frozen selection, e.g. when recomputing over an extended sequence).
    ``capture_attn`` records every cross block's (H, n, n_kv) weights.
    """
    cfg = model.cfg
    if text_embeds.ndim != 2 or text_embeds.shape[0] < 1:
        raise DimensionError(f"text embeddings must be (n >= 1, d), got {text_embeds.shape}")
    if text_embeds.shape[1] != cfg.d or img.feats.shape[1] != cfg.d:
        raise DimensionError(
            f"width mismatch: model d={cfg.d}, text {text_embeds.shape}, image {img.feats.shape}"
        )
    if selection is not None and selection.n_features != img.n_k:
        raise DimensionError(f"selection covers {selection.n_features} features, image has {img.n_k}")
    phase = "prefill"
    x = text_embeds.astype(np.float32, copy=True)
    self_k, self_v, cross_k, cross_v = [], [], [], []
    first_attn = None
    kept_bias = None
    idx = None
    captured = []
    for layer, lw in enumerate(model.layers):
        kind = lw.kind
        h = rms_norm(x)
        q = _project_q(lw, h, cfg, counter, phase, layer, kind)
        if kind == "self":
            k, v = _project_kv(lw, h, cfg, counter, phase, layer, kind)
            out, _ = _attend_heads(cfg, q, k, v, True, None, counter, phase, layer, kind)
            self_k.append(k)
            self_v.append(v)
        elif first_attn is None:
            k, v = _project_kv(lw, img.feats, cfg, counter, phase, layer, kind)
            out, w = _attend_heads(cfg, q, k, v, False, img.bias, counter, phase, layer, kind)
            first_attn = w
            sel = selection if selection is not None else _select(prune, w, img.n_k)
            if not sel.kept:
                raise SelectionEmptyError("selection kept no image features")
            idx = sel.indices()
            kept_bias = img.bias[idx] if img.bias is not None else None
            cross_k.append(np.ascontiguousarray(k[:, idx]))
            cross_v.append(np.ascontiguousarray(v[:, idx]))
            if capture_attn:
                captured.append(w)
        else:
            k, v = _project_kv(lw, img.feats[idx], cfg, counter, phase, layer, kind)
            out, w = _attend_heads(cfg, q, k, v, False, kept_bias, counter, phase, layer, kind)
            cross_k.append(k)
            cross_v.append(v)
            if capture_attn:
                captured.append(w)
        x = x + matmul(out, lw.wo, counter, (phase, layer, kind, cm.PROJ_O))
        x = _ffn(lw, x, counter, phase, layer, kind)
    state = KvCacheState(
        self_k=self_k, self_v=self_v, cross_k=cross_k, cross_v=cross_v,
        cross_bias=kept_bias, selection=sel, config_key=cfg, dtype_bytes=cfg.dtype_bytes,
    )
    return ForwardResult(hidden=x, selection=sel, caches=state, first_layer_attn=first_attn,
                         cross_attn=captured)


def decode_step(model: Model, state: KvCacheState, next_embed: np.ndarray,
                counter: FlopCounter | None = None):
    """Advance one position. Mutates and returns ``state``."""
    cfg = model.cfg
    if state.config_key != cfg:
        raise StateError("cache state was built by a different model configuration")
    if len(state.self_k) != cfg.S or len(state.cross_k) != cfg.C:
        raise StateError(
            f"state has {len(state.self_k)} self / {len(state.cross_k)} cross layers, "
            f"model expects {cfg.S} / {cfg.C}"
        )
    if next_embed.shape != (1, cfg.d):
        raise DimensionError(f"next embedding must be (1, {cfg.d}), got {next_embed.shape}")
    phase = f"decode{state.steps}"
    x = next_embed.astype(np.float32, copy=True)
    si = ci = 0
    for layer, lw in enumerate(model.layers):
        kind = lw.kind
        h = rms_norm(x)
        q = _project_q(lw, h, cfg, counter, phase, layer, kind)
        if kind == "self":
            k, v = _project_kv(lw, h, cfg, counter, phase, layer, kind)
            state.self_k[si] = np.concatenate([state.self_k[si], k], axis=1)
            state.self_v[si] = np.concatenate([state.self_v[si], v], axis=1)
            out, _ = _attend_heads(cfg, q, state.self_k[si], state.self_v[si], False, None,
                                   counter, phase, layer, kind)
            si += 1
        else:
            out, _ = _attend_heads(cfg, q, state.cross_k[ci], state.cross_v[ci], False,
                                   state.cross_bias, counter, phase, layer, kind)
            ci += 1
        x = x + matmul(out, lw.wo, counter, (phase, layer, kind, cm.PROJ_O))
        x = _ffn(lw, x, counter, phase, layer, kind)
    state.steps += 1
    state.history.append(state.n_cur)
    return x, state


def generate(model: Model, text_embeds: np.ndarray, img: ImageFeatures, prune: PruneConfig = PruneConfig(),
             steps: int = 0, selection: Selection | None = None):
    """Prefill then ``steps`` pseudo-decoding steps.

    Each step's input is the RMS-normalised output hidden of the previous
    position, so no vocabulary is needed. Returns ``(hiddens, report)``
    where ``hiddens[0]`` is the (n, d) prefill output and the rest are (1, d).
    """
    if steps < 0:
        raise ValueError(f"steps must be >= 0, got {steps}")
    counter = FlopCounter()
    t0 = time.perf_counter()
    res = prefill(model, text_embeds, img, prune, counter=counter, selection=selection)
    t1 = time.perf_counter()
    hiddens = [res.hidden]
    state = res.caches
    nxt = rms_norm(res.hidden[-1:])
    for _ in range(steps):
        h, state = decode_step(model, state, nxt, counter)
        hiddens.append(h)
        nxt = rms_norm(h)
    t2 = time.perf_counter()
    cfg = model.cfg
    report = build_report(
        counter, n=text_embeds.shape[0], n_k=img.n_k, kept=len(res.selection.kept),
        d=cfg.d, m=cfg.m, S=cfg.S, C=cfg.C,
        self_layers=model.self_layers, cross_layers=model.cross_layers,
        decode_contexts=list(state.history),
    )
    report.timing = {"prefill_s": t1 - t0, "decode_s": t2 - t1}
    report.selection = res.selection
    report.state = state
    return hiddens, report

"""Training-free trimming of cross-attention image features, with KV-cache
accounting and analytic cost models for a toy vision-language decoder."""

from crossprune.cost_model import (
    CostReport,
    FlopCounter,
    flops_cross,
    flops_prune,
    flops_self,
    heatmap,
    reduction_ratio,
    verify_counter,
)
from crossprune.kv_cache import KvCacheState, cache_bytes, crossover_tokens, reduction_bytes
from crossprune.model import (
    ImageFeatures,
    ModelConfig,
    PruneConfig,
    build_model,
    decode_step,
    generate,
    make_inputs,
    prefill,
)
from crossprune.trimming import (
    Selection,
    accumulate_importance,
    baseline_random,
    baseline_spatial,
    select_topk_per_head,
    trim,
    union_selection,
)

__version__ = "0.1.0"

"""Token-level sparse decode attention over a paged KV cache."""
from .attention import (
    AttentionConfig,
    AttentionOutput,
    SparseIndexSet,
    dense_decode,
    gqa_kv_head,
    reference_decode,
    sparse_decode,
)
from .collapse import (
    CollapseWitness,
    find_collapse_pair,
    min_width_for_injectivity,
    null_zero_sum_direction,
    verify_witness,
)
from .kernels import BACKEND
from .kv_store import CacheConfig, KvPage, PageTable, PagedKvCache, token_location
from .selectors import (
    ChannelSketch,
    SelectorSpec,
    budget_from_sparsity,
    build_channel_sketch,
    select_double_sparsity,
    select_indices,
    select_oracle_topk,
    select_sink_local_heavy,
    select_stochastic,
)
from .traffic import (
    Calibration,
    TrafficEstimate,
    WorkloadGeometry,
    break_even_sparsity,
    estimate_dense,
    estimate_fixed_state,
    estimate_indexer,
    estimate_sparse,
    fit_calibration,
    predict_speedup,
)

__version__ = "0.1.0"

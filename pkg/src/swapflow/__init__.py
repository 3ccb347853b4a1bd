"""swapflow: desk-scale active-weight swapping between a flash store and a
bounded DRAM budget, driven by Top-K contextual sparsity."""

from .cache import CacheState, access, admit, build_task_cache, hit_rate, make_cache, reset_context
from .errors import (
    BudgetFault,
    FormatError,
    InputError,
    PlanningError,
    SpecError,
    StoreError,
    SwapflowError,
)
from .model import (
    OP_ORDER,
    OP_SITE,
    ActivationTrace,
    Model,
    ModelSpec,
    OpType,
    Site,
    WeightTensor,
    decode_greedy,
    forward_dense,
    forward_sparse,
    gen_model,
    load_model,
    save_model,
)
from .pipeline import DecodeTrace, MaskSelector, decode, on_demand_load, preload_group, timing_report
from .planner import CostParams, Plan, estimate_hr_si, memory_cost, plan, predict_decode_time
from .quant import dequantize_q4, quantize_q4
from .sparsity import (
    ActiveSet,
    SimilarityReport,
    ThresholdTable,
    calibrate_thresholds,
    cross_layer_similarity,
    importance_scores,
    topk_mask,
    topk_precision,
    upper_bound_sparsity,
)
from .store import (
    BandwidthModel,
    PackedStore,
    ReadStats,
    default_profile,
    open_store,
    pack,
    simulate_read_time,
    unpack,
)

__version__ = "0.1.0"

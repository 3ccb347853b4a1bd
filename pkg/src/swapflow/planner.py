"""Closed-form cost model and the greedy preload/computation-balanced
parameter search.

The closed form treats the large-chunk flash bandwidth as a constant of
its parameters; the group-size search is where the chunk-size dependence
enters, by looking the effective bandwidth up in the device profile at
the chunk implied by each candidate group size.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from typing import Mapping, Sequence

from . import cache as cache_mod
from .errors import InputError, PlanningError
from .model import OP_ORDER, ActivationTrace, ModelSpec
from .sparsity import cross_layer_similarity
from .store import BandwidthModel

DEFAULT_HR = 0.6
DEFAULT_SI = 0.8
DEFAULT_STOP_THRESHOLD = 0.05


@dataclass
class CostParams:
    """Inputs of the closed-form decode-time and memory equations."""

    sp: float  # sparsity fraction of the model
    hr: float  # average weight-cache hit rate
    si: float  # average cross-layer-group similarity
    bw_mem: float  # bytes/s
    bw_small_flash: float  # bytes/s, small-chunk reads
    bw_large_flash: float  # bytes/s, large-chunk reads
    s_m: float  # model bytes
    s_l: float  # layer bytes
    n_group: int  # layers per cross-layer group
    m_max: float  # memory budget, bytes
    m_cache: float  # weight-cache bytes
    m_kv: float  # KV-cache bytes (fixed)

    def validate(self) -> None:
        for name in ("sp", "hr", "si"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0):
                raise InputError(f"{name}={v} outside [0, 1]")
        for name in ("bw_mem", "bw_small_flash", "bw_large_flash"):
            if getattr(self, name) <= 0:
                raise InputError(f"{name} must be positive")
        if self.s_l <= 0 or self.s_m <= 0:
            raise InputError("sizes must be positive")
        n_layers = self.n_layers
        if abs(self.s_l * n_layers - self.s_m) > 1e-6 * self.s_m:
            raise InputError("s_l * n_layers must equal s_m")
        if not (1 <= self.n_group <= n_layers):
            raise InputError(f"group size {self.n_group} outside [1, {n_layers}]")

    @property
    def n_layers(self) -> int:
        return int(round(self.s_m / self.s_l))


@dataclass
class TimeBreakdown:
    m_cl: float
    n_groups: int
    t_load: float
    t_comp: float
    t_onload: float
    t_preload: float
    t_overlap: float
    t_decode: float


def predict_decode_time(p: CostParams) -> TimeBreakdown:
    """Evaluate the decode-time equations exactly.

    Per-token time is the first group's load, one overlap term per group
    boundary, and the last group's compute:

        m_cl      = s_l * (1 - sp) * N
        t_load    = m_cl * (1 - hr) / bw_small
        t_comp    = m_cl / bw_mem
        t_onload  = s_l * (1 - sp) * (1 - hr) * (1 - si) / bw_small
        t_preload = m_cl * (1 - hr) / bw_large
        t_overlap = t_onload + max(t_preload, t_comp)
        t_decode  = t_load + (G - 1) * t_overlap + t_comp
    """
    p.validate()
    m_cl = p.s_l * (1.0 - p.sp) * p.n_group
    n_groups = math.ceil(p.n_layers / p.n_group)
    t_load = m_cl * (1.0 - p.hr) / p.bw_small_flash
    t_comp = m_cl / p.bw_mem
    t_onload = p.s_l * (1.0 - p.sp) * (1.0 - p.hr) * (1.0 - p.si) / p.bw_small_flash
    t_preload = m_cl * (1.0 - p.hr) / p.bw_large_flash
    t_overlap = t_onload + max(t_preload, t_comp)
    t_decode = t_load + (n_groups - 1) * t_overlap + t_comp
    return TimeBreakdown(m_cl, n_groups, t_load, t_comp, t_onload, t_preload, t_overlap, t_decode)


def memory_cost(p: CostParams) -> float:
    """M = M_cl + M_cache + M_kv."""
    return p.s_l * (1.0 - p.sp) * p.n_group + p.m_cache + p.m_kv


@dataclass
class Plan:
    sparsity: float
    group_size: int
    m_cache: int
    m_kv: int
    m_max: int
    params: CostParams
    predicted: TimeBreakdown
    assumptions: dict

    def to_json(self, path) -> None:
        doc = {
            "sparsity": self.sparsity,
            "group_size": self.group_size,
            "m_cache": self.m_cache,
            "m_kv": self.m_kv,
            "m_max": self.m_max,
            "params": asdict(self.params),
            "predicted": asdict(self.predicted),
            "assumptions": self.assumptions,
        }
        with open(path, "w") as fh:
            json.dump(doc, fh, indent=2, sort_keys=True)
            fh.write("\n")

    @staticmethod
    def from_json(path) -> "Plan":
        with open(path) as fh:
            doc = json.load(fh)
        return Plan(
            sparsity=float(doc["sparsity"]),
            group_size=int(doc["group_size"]),
            m_cache=int(doc["m_cache"]),
            m_kv=int(doc["m_kv"]),
            m_max=int(doc["m_max"]),
            params=CostParams(**doc["params"]),
            predicted=TimeBreakdown(**doc["predicted"]),
            assumptions=dict(doc["assumptions"]),
        )


def mean_channel_bytes(spec: ModelSpec) -> float:
    channels = sum(spec.op_shape(op)[1] for op in OP_ORDER)
    return spec.layer_bytes() / channels


def active_layer_bytes(spec: ModelSpec, sparsity: float) -> int:
    """Exact bytes of one layer's active channels under exact-k masks.

    Slightly above s_l * (1 - sp) in general: per-op counts round and
    never drop below one channel.
    """
    from .sparsity import exact_k

    total = 0
    for op in OP_ORDER:
        _, cols = spec.op_shape(op)
        total += exact_k(cols, sparsity) * spec.channel_bytes(op)
    return total


def dram_high_water(spec: ModelSpec, sparsity: float, group_size: int, m_cache: int, m_kv: int) -> int:
    """Upper bound on instantaneous decode DRAM.

    Double buffering keeps two group buffers alive at a boundary (the
    computing group and the arriving preload), plus at most one layer's
    worth of on-demand slices, the cache, and the fixed KV block.
    """
    active_layer = active_layer_bytes(spec, sparsity)
    m_cl = active_layer * group_size
    return int(math.ceil(2.0 * m_cl + active_layer + m_cache + m_kv))


def plan(
    spec: ModelSpec,
    profile: BandwidthModel,
    m_max: int,
    m_kv: int = 0,
    hr: float | None = None,
    si: float | None = None,
    stop_threshold: float = DEFAULT_STOP_THRESHOLD,
) -> Plan:
    """Greedy parameter search under a memory budget.

    Sparsity comes straight from the budget ratio, sp = max(0, 1 - M_max/S_m),
    which pins model quality; then the group size grows while per-layer
    preload time exceeds per-layer compute time and each increment still
    shrinks it by more than ``stop_threshold`` (relative). The remaining
    budget, after reserving two group buffers plus one layer of on-demand
    slack, becomes the weight cache.
    """
    assumptions = {"hr_assumed": hr is None, "si_assumed": si is None}
    hr = DEFAULT_HR if hr is None else hr
    si = DEFAULT_SI if si is None else si
    if m_max <= 0:
        raise PlanningError("memory budget must be positive", {"m_max": m_max})
    s_m = spec.model_bytes()
    s_l = spec.layer_bytes()
    sp = max(0.0, 1.0 - m_max / s_m)
    cb = mean_channel_bytes(spec)
    bw_small = profile.throughput(int(round(cb)))
    active_layer = s_l * (1.0 - sp)
    t_comp_layer = active_layer / profile.bw_mem

    def t_preload_layer(n: int) -> float:
        return active_layer * (1.0 - hr) / profile.throughput(int(round(n * cb)))

    n = 1
    while True:
        t_pre = t_preload_layer(n)
        if t_pre <= t_comp_layer or n >= spec.n_layers:
            break
        decrement = t_pre - t_preload_layer(n + 1)
        if decrement <= stop_threshold * t_pre:
            break
        n += 1

    # reserve against the exact worst-case buffer bytes, with a density
    # margin so threshold-selected masks (realized sparsity varies a few
    # points around sp) stay inside the budget too
    margined = active_layer_bytes(spec, max(0.0, sp - 0.10))

    def reserve(n_group: int) -> float:
        return 2.0 * margined * n_group + margined

    while n > 1 and m_kv + reserve(n) > m_max:
        n -= 1
    if m_kv + reserve(n) > m_max:
        raise PlanningError(
            "budget cannot hold even a single-layer group with double buffering",
            {
                "m_max": m_max,
                "m_kv": m_kv,
                "required": m_kv + reserve(n),
                "sparsity": sp,
            },
        )
    m_cache = int(m_max - m_kv - reserve(n))
    params = CostParams(
        sp=sp,
        hr=hr,
        si=si,
        bw_mem=profile.bw_mem,
        bw_small_flash=bw_small,
        bw_large_flash=profile.throughput(int(round(n * cb))),
        s_m=float(s_m),
        s_l=float(s_l),
        n_group=n,
        m_max=float(m_max),
        m_cache=float(m_cache),
        m_kv=float(m_kv),
    )
    predicted = predict_decode_time(params)
    if memory_cost(params) > m_max + 1e-9:
        raise PlanningError("internal: plan exceeds its own budget", {"m": memory_cost(params)})
    return Plan(
        sparsity=sp,
        group_size=n,
        m_cache=m_cache,
        m_kv=m_kv,
        m_max=m_max,
        params=params,
        predicted=predicted,
        assumptions=assumptions,
    )


def estimate_hr(
    mask_trace: Sequence[Mapping],
    spec: ModelSpec,
    cache_budget_bytes: int,
) -> float:
    """Dry-run cache replay over a recorded mask trace."""
    if len(mask_trace) == 0:
        raise InputError("mask trace is empty")
    state = cache_mod.make_cache(spec, budget_bytes=cache_budget_bytes)
    cache_mod.reset_context(state, reset_stats=True)
    for step in mask_trace:
        for op_id in sorted(step, key=lambda k: (k[0], k[1].value)):
            _, misses = cache_mod.access(state, op_id, step[op_id])
            for ch in misses:
                cache_mod.admit(state, op_id, ch, None)
    return cache_mod.hit_rate(state)


def estimate_si(trace: ActivationTrace, sparsity: float) -> float:
    """Mean consecutive-layer top-k precision over all sites."""
    return cross_layer_similarity(trace, sparsity).mean_precision()


def estimate_hr_si(
    spec: ModelSpec,
    sparsity: float,
    activation_trace: ActivationTrace | None = None,
    mask_trace: Sequence[Mapping] | None = None,
    cache_budget_bytes: int = 0,
) -> tuple[float, float, dict]:
    """(hr, si) from calibration data where available, defaults otherwise.

    Returned assumptions flag which of the two fell back to a default.
    """
    assumptions = {"hr_assumed": mask_trace is None, "si_assumed": activation_trace is None}
    hr = DEFAULT_HR if mask_trace is None else estimate_hr(mask_trace, spec, cache_budget_bytes)
    si = DEFAULT_SI if activation_trace is None else estimate_si(activation_trace, sparsity)
    return hr, si, assumptions

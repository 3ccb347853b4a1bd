"""Contextual hot-weight cache.

One frequency counter set per tensor (op_id = (layer, op)), least-used
eviction with admission control, context-level counter reset, and a
frozen task-level baseline built from dataset-wide frequencies.

Only the loader worker mutates a cache; the compute worker sees residency
through the loader's request/response protocol, so no locking is needed.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import InputError
from .model import OP_ORDER, ModelSpec, OpType

OpId = tuple[int, OpType]


@dataclass
class TensorCache:
    """Residency and counters for one weight tensor."""

    capacity: int
    n_channels: int
    channel_bytes: int
    resident: dict[int, object] = field(default_factory=dict)  # channel -> payload
    counters: dict[int, int] = field(default_factory=dict)

    def __post_init__(self):
        if self.capacity < 0 or self.capacity > self.n_channels:
            raise InputError(
                f"capacity {self.capacity} outside [0, {self.n_channels}]"
            )


@dataclass
class CacheState:
    tensors: dict[OpId, TensorCache]
    n_hit: int = 0
    n_miss: int = 0
    frozen: bool = False  # task-level baseline: no admission, no eviction

    def tensor(self, op_id: OpId) -> TensorCache:
        return self.tensors[op_id]

    def resident_channels(self, op_id: OpId) -> frozenset:
        return frozenset(self.tensors[op_id].resident)

    def resident_bytes(self) -> int:
        return sum(len(t.resident) * t.channel_bytes for t in self.tensors.values())

    def capacity_bytes(self) -> int:
        return sum(t.capacity * t.channel_bytes for t in self.tensors.values())


def split_budget(spec: ModelSpec, budget_bytes: int) -> dict[OpId, int]:
    """Per-tensor channel capacities from a byte budget.

    Capacity is proportional to each tensor's channel count (equal absolute
    counts would starve the wide FFN tensors); the resulting byte total
    never exceeds the budget.
    """
    if budget_bytes < 0:
        raise InputError("budget must be non-negative")
    total = spec.model_bytes()
    frac = min(1.0, budget_bytes / total) if total else 0.0
    caps: dict[OpId, int] = {}
    for layer in range(spec.n_layers):
        for op in OP_ORDER:
            _, cols = spec.op_shape(op)
            caps[(layer, op)] = int(np.floor(frac * cols))
    return caps


def make_cache(spec: ModelSpec, budget_bytes: int | None = None, capacities: Mapping[OpId, int] | None = None) -> CacheState:
    if (budget_bytes is None) == (capacities is None):
        raise InputError("pass exactly one of budget_bytes or capacities")
    if capacities is None:
        capacities = split_budget(spec, budget_bytes)
    tensors = {}
    for layer in range(spec.n_layers):
        for op in OP_ORDER:
            _, cols = spec.op_shape(op)
            cap = int(capacities.get((layer, op), 0))
            tensors[(layer, op)] = TensorCache(
                capacity=min(cap, cols), n_channels=cols, channel_bytes=spec.channel_bytes(op)
            )
    return CacheState(tensors)


def reset_context(state: CacheState, reset_stats: bool = False) -> None:
    """Zero all usage counters at a context boundary; residency is kept."""
    for t in state.tensors.values():
        t.counters = {ch: 0 for ch in t.resident}
    if reset_stats:
        state.n_hit = 0
        state.n_miss = 0


def access(state: CacheState, op_id: OpId, channels: Iterable[int]) -> tuple[list[int], list[int]]:
    """Partition requested channels by residency and bump their counters.

    Returns (hits, misses), both sorted. Does not admit anything; the
    caller loads the misses and offers them via :func:`admit`.
    """
    t = state.tensors[op_id]
    hits: list[int] = []
    misses: list[int] = []
    for ch in sorted(int(c) for c in channels):
        if not (0 <= ch < t.n_channels):
            raise InputError(f"channel {ch} out of range for {op_id}")
        t.counters[ch] = t.counters.get(ch, 0) + 1
        if ch in t.resident:
            hits.append(ch)
        else:
            misses.append(ch)
    state.n_hit += len(hits)
    state.n_miss += len(misses)
    return hits, misses


def admit(state: CacheState, op_id: OpId, channel: int, payload) -> bool:
    """Offer a just-loaded channel to the cache.

    With free capacity the channel is inserted. Otherwise the least-used
    resident (ties: lowest channel index) is evicted only if the new
    channel's count is at least the victim's; otherwise the payload is
    discarded (it was still used for the current computation).
    """
    if state.frozen:
        return False
    t = state.tensors[op_id]
    channel = int(channel)
    if channel in t.resident:
        return True
    if t.capacity == 0:
        return False
    if len(t.resident) < t.capacity:
        t.resident[channel] = payload
        t.counters.setdefault(channel, 0)
        return True
    victim = min(t.resident, key=lambda ch: (t.counters.get(ch, 0), ch))
    if t.counters.get(channel, 0) >= t.counters.get(victim, 0):
        del t.resident[victim]
        t.resident[channel] = payload
        t.counters.setdefault(channel, 0)
        return True
    return False


def hit_rate(state: CacheState) -> float:
    total = state.n_hit + state.n_miss
    return state.n_hit / total if total else 0.0


def build_task_cache(
    mask_trace: Sequence[Mapping[OpId, Iterable[int]]],
    spec: ModelSpec,
    capacity: int | Mapping[OpId, int],
) -> CacheState:
    """Frozen task-level baseline: per tensor, the top-``capacity`` channels
    by selection frequency across the whole trace (ties: lower index)."""
    if len(mask_trace) == 0:
        raise InputError("mask trace is empty")
    freq: dict[OpId, dict[int, int]] = {}
    for step in mask_trace:
        for op_id, channels in step.items():
            bucket = freq.setdefault(op_id, {})
            for ch in channels:
                bucket[int(ch)] = bucket.get(int(ch), 0) + 1
    caps = capacity if isinstance(capacity, Mapping) else None
    state = make_cache(
        spec,
        capacities=caps if caps is not None else {
            (layer, op): int(capacity)
            for layer in range(spec.n_layers)
            for op in OP_ORDER
        },
    )
    for op_id, t in state.tensors.items():
        counts = freq.get(op_id, {})
        ranked = sorted(counts, key=lambda ch: (-counts[ch], ch))
        for ch in ranked[: t.capacity]:
            t.resident[ch] = None
            t.counters[ch] = 0
        # fill any remaining capacity with the lowest unranked indices
        if len(t.resident) < t.capacity:
            for ch in range(t.n_channels):
                if len(t.resident) >= t.capacity:
                    break
                if ch not in t.resident:
                    t.resident[ch] = None
                    t.counters[ch] = 0
    state.frozen = True
    return state

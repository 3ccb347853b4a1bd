"""Decode-time orchestrator: compute / top-k / on-demand load / preload.

Two logical workers cooperate per token: the compute worker walks the
layer stack, extracts masks from actual activations, and blocks on any
on-demand read; the loader worker serves reads, with on-demand requests
preempting queued preload requests at request granularity. While a
group's first layer runs, the next group's channels are predicted from
that layer's site activations (each site issues as soon as it is
computed) and fetched as cross-layer runs. The workers' clocks join with
max() at each group boundary, where the arrived preload buffer becomes
the new group's active buffer.

SIMULATED mode advances a virtual clock: compute charges packed bytes
touched / memory bandwidth, reads charge the device-profile model, so
runs are fully deterministic. REAL_IO mode performs the same reads
against the file on one serialized schedule with wall-clock timings;
bytes are contractual there, overlap is not.
"""

from __future__ import annotations

import time
from collections import deque
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import cache as cache_mod
from .cache import CacheState
from .errors import BudgetFault, InputError
from .model import (
    OP_ORDER,
    OP_SITE,
    Decoder,
    Model,
    ModelSpec,
    OpType,
    Site,
    masked_gemv,
    zeroed_vector,
)
from .planner import Plan
from .sparsity import ActiveSet, ThresholdTable, exact_k, topk_mask
from .store import (
    REAL_IO,
    BandwidthModel,
    GroupLayout,
    PackedStore,
    ReadStats,
    default_profile,
)

F32 = 4


def ops_of_site(site: Site) -> tuple[OpType, ...]:
    return tuple(op for op in OP_ORDER if OP_SITE[op] is site)


class MaskSelector:
    """Turns a site activation into an operator's active-channel set."""

    def __init__(self, spec: ModelSpec, sparsity: float, table: ThresholdTable | None = None):
        self.spec = spec
        self.sparsity = float(sparsity)
        self.table = table
        if table is None:
            self._k = {op: exact_k(spec.op_shape(op)[1], self.sparsity) for op in OP_ORDER}

    @staticmethod
    def from_sparsity(spec: ModelSpec, sparsity: float) -> "MaskSelector":
        return MaskSelector(spec, sparsity)

    @staticmethod
    def from_thresholds(spec: ModelSpec, table: ThresholdTable, sparsity: float) -> "MaskSelector":
        if not any(abs(lvl - sparsity) < 1e-12 for lvl in table.levels()):
            raise InputError(f"threshold table has no level {sparsity}")
        return MaskSelector(spec, sparsity, table)

    def select(self, op: OpType, site_vec: np.ndarray) -> ActiveSet:
        if self.table is not None:
            return topk_mask(site_vec, tau=self.table.tau(op, self.sparsity))
        return topk_mask(site_vec, k=self._k[op])


@dataclass
class PreloadDecision:
    """What one operator contributes to a group preload request."""

    predicted: ActiveSet
    to_read: tuple[int, ...]  # predicted minus channels resident for every group layer


def preload_group(
    trigger: Mapping[Site, np.ndarray],
    selector: MaskSelector,
    group: GroupLayout,
    cache_state: CacheState,
) -> dict[OpType, PreloadDecision]:
    """Predict a group's active channels from trigger activations.

    Each operator's mask comes from the trigger at that operator's own
    site; operators whose site is absent from ``trigger`` are skipped.
    A channel is dropped from the read only when it is cache resident for
    every layer of the group, because a cross-layer run cannot skip
    interior layers.
    """
    decisions: dict[OpType, PreloadDecision] = {}
    layers = range(group.first_layer, group.first_layer + group.n_layers)
    for op in OP_ORDER:
        site = OP_SITE[op]
        if site not in trigger:
            continue
        predicted = selector.select(op, trigger[site])
        to_read = tuple(
            ch
            for ch in predicted
            if not all(ch in cache_state.tensors[(l, op)].resident for l in layers)
        )
        decisions[op] = PreloadDecision(predicted, to_read)
    return decisions


def on_demand_load(actual, preloaded, resident) -> tuple[int, ...]:
    """Channels to fetch on the critical path: active but neither preloaded
    nor cache resident."""
    pre = set(preloaded)
    res = set(resident)
    return tuple(ch for ch in actual if ch not in pre and ch not in res)


# ---------------------------------------------------------------------------
# Workers
# ---------------------------------------------------------------------------


class _Loader:
    """Virtual-time loader. FIFO over queued preload requests; an on-demand
    batch runs right after the in-flight request, ahead of queued ones."""

    def __init__(self):
        self.free_at = 0.0
        self.pending: deque[tuple[float, float, int]] = deque()  # (ready, duration, tag)

    def enqueue(self, ready: float, durations: Sequence[float], tag: int) -> None:
        for d in durations:
            self.pending.append((ready, d, tag))

    def _work_until(self, t: float) -> None:
        # background progress: start any queued request whose start precedes t
        while self.pending and max(self.free_at, self.pending[0][0]) < t:
            ready, dur, _ = self.pending.popleft()
            self.free_at = max(self.free_at, ready) + dur

    def on_demand(self, t: float, durations: Sequence[float]) -> float:
        self._work_until(t)
        start = max(self.free_at, t)
        self.free_at = start + sum(durations)
        return self.free_at

    def drain(self, tag: int) -> float:
        while self.pending:
            ready, dur, req_tag = self.pending.popleft()
            if req_tag != tag:
                raise InputError("loader queue holds requests for another group")
            self.free_at = max(self.free_at, ready) + dur
        return self.free_at


class _DramTracker:
    """Instantaneous DRAM accounting, in packed byte units: active group
    slices + arriving preload buffer + cache + fixed KV block."""

    def __init__(self, m_kv: int, m_max: int):
        self.group_bytes = 0
        self.incoming_bytes = 0
        self.cache_bytes = 0
        self.m_kv = m_kv
        self.m_max = m_max
        self.peak = 0
        self.token = 0
        self.group = 0

    def current(self) -> int:
        return self.group_bytes + self.incoming_bytes + self.cache_bytes + self.m_kv

    def touch(self) -> None:
        cur = self.current()
        if cur > self.peak:
            self.peak = cur
        if cur > self.m_max:
            raise BudgetFault(
                f"resident bytes {cur} exceed budget {self.m_max} "
                f"(token {self.token}, group {self.group})",
                token=self.token,
                group=self.group,
                resident_bytes=cur,
                budget=self.m_max,
            )


# ---------------------------------------------------------------------------
# Trace records
# ---------------------------------------------------------------------------


@dataclass
class GroupPlanStep:
    group_id: int
    group_layers: int = 0
    preload_masks: dict[OpType, ActiveSet] = field(default_factory=dict)
    channels_read: dict[OpType, tuple[int, ...]] = field(default_factory=dict)
    onload: dict[tuple[int, OpType], tuple[int, ...]] = field(default_factory=dict)
    t_preload: float = 0.0
    t_onload: float = 0.0
    t_topk: float = 0.0
    t_comp: float = 0.0
    boundary_wait: float = 0.0  # compute idle at group entry, waiting for preload
    ond_wait: float = 0.0  # compute idle waiting for the loader's in-flight request
    bytes_preload: int = 0
    bytes_onload: int = 0
    n_hit: int = 0
    n_miss: int = 0
    preload_used_pairs: int = 0
    preload_total_pairs: int = 0
    used_by_op: dict[OpType, int] = field(default_factory=dict)

    @property
    def preload_precision(self) -> float:
        if self.preload_total_pairs == 0:
            return 1.0
        return self.preload_used_pairs / self.preload_total_pairs

    def preload_precision_by_op(self) -> dict[OpType, float]:
        """Fraction of preloaded (layer, channel) pairs actually used, per op."""
        out: dict[OpType, float] = {}
        for op, predicted in self.preload_masks.items():
            total = len(predicted) * self.group_layers
            out[op] = self.used_by_op.get(op, 0) / total if total else 1.0
        return out


@dataclass
class TokenRecord:
    index: int
    token_in: int
    token_out: int
    wall_time: float
    bubble: float  # total compute idle time (boundary + on-demand waits)
    peak_dram: int
    n_hit: int
    n_miss: int
    groups: list[GroupPlanStep] = field(default_factory=list)


@dataclass
class DecodeTrace:
    prompt_len: int
    group_size: int
    m_max: int
    tokens: list[TokenRecord] = field(default_factory=list)
    step_masks: list[dict[tuple[int, OpType], ActiveSet]] = field(default_factory=list)

    def write_csv(self, path) -> None:
        # rows cover the steps that emit generated tokens (prompt warm-up
        # steps stay in the in-memory trace only); the trailing three
        # columns carry per-token totals, repeated on each group row
        first = self.prompt_len - 1
        emitted = [rec for rec in self.tokens[first:] if rec.index < first + self._n_generated()]
        with open(path, "w") as fh:
            fh.write(
                "token,group,t_preload_us,t_onload_us,t_topk_us,t_comp_us,"
                "bytes_preload,bytes_onload,n_hit,n_miss,preload_precision,"
                "wall_us,bubble_us,peak_dram\n"
            )
            for i, rec in enumerate(emitted):
                for g in rec.groups:
                    fh.write(
                        f"{i},{g.group_id},{g.t_preload * 1e6!r},{g.t_onload * 1e6!r},"
                        f"{g.t_topk * 1e6!r},{g.t_comp * 1e6!r},{g.bytes_preload},{g.bytes_onload},"
                        f"{g.n_hit},{g.n_miss},{g.preload_precision!r},"
                        f"{rec.wall_time * 1e6!r},{rec.bubble * 1e6!r},{rec.peak_dram}\n"
                    )

    def _n_generated(self) -> int:
        return len(self.tokens) - self.prompt_len


# ---------------------------------------------------------------------------
# Decode
# ---------------------------------------------------------------------------


class _PipelineRun:
    def __init__(
        self,
        store: PackedStore,
        cache_state: CacheState,
        plan: Plan,
        selector: MaskSelector,
        profile: BandwidthModel,
        embedding: np.ndarray,
    ):
        self.store = store
        self.spec = store.spec
        self.cache = cache_state
        self.plan = plan
        self.selector = selector
        self.profile = profile
        self.group_size = store.group_size
        self.n_groups = store.n_groups
        self.real = store.mode == REAL_IO
        self.loader = _Loader()
        self.tracker = _DramTracker(plan.m_kv, plan.m_max)
        self.clock = 0.0
        self.decoder = Decoder(Model(self.spec, embedding, {}))
        # per-token state, reset in run_token
        self.rows: dict[int, GroupPlanStep] = {}
        self.cur_group: int | None = None
        self.buf: dict[tuple[int, OpType], dict[int, np.ndarray]] = {}
        self.layer_ond: dict[tuple[int, OpType], dict[int, np.ndarray]] = {}
        self.incoming_raw: dict[OpType, dict[int, bytes]] = {}
        self.incoming_decisions: dict[OpType, PreloadDecision] = {}
        self.cur_predicted: dict[OpType, frozenset] = {}
        self.issued_sites: set[Site] = set()
        self.step_masks: dict[tuple[int, OpType], ActiveSet] = {}
        self.bubble = 0.0

    # -- helpers ----------------------------------------------------------

    def _read_durations(self, stats: ReadStats) -> list[float]:
        return [
            self.profile.req_latency_s + size / self.profile.throughput(size)
            for size in stats.chunk_sizes
        ]

    def _row(self, gid: int) -> GroupPlanStep:
        if gid not in self.rows:
            self.rows[gid] = GroupPlanStep(group_id=gid)
        return self.rows[gid]

    # -- group transitions --------------------------------------------------

    def _enter_group(self, gid: int) -> None:
        row = self._row(gid)
        self.tracker.group = gid
        if gid > 0:
            done = self.loader.drain(tag=gid)
            wait = max(0.0, done - self.clock)
            row.boundary_wait = wait
            self.bubble += wait
            self.clock = max(self.clock, done)
        group = self.store.groups[gid]
        for op, raw_by_ch in self.incoming_raw.items():
            for ch, raw in raw_by_ch.items():
                run = self.store.decode_run(op, raw, group.n_layers)
                for rel in range(group.n_layers):
                    self.buf.setdefault((group.first_layer + rel, op), {})[ch] = run[rel]
        self.cur_predicted = {
            op: dec.predicted.as_set() for op, dec in self.incoming_decisions.items()
        }
        # buffer swap: arrived preload becomes the active group's buffer
        self.tracker.group_bytes += self.tracker.incoming_bytes
        self.tracker.incoming_bytes = 0
        self.incoming_raw = {}
        self.incoming_decisions = {}
        self.issued_sites = set()
        self.cur_group = gid
        self.tracker.touch()

    def _issue_preload(self, site: Site, site_vec: np.ndarray) -> None:
        gid = self.cur_group + 1
        if gid >= self.n_groups:
            return
        group = self.store.groups[gid]
        row = self._row(gid)
        row.group_layers = group.n_layers
        decisions = preload_group({site: site_vec}, self.selector, group, self.cache)
        for op in ops_of_site(site):
            decision = decisions[op]
            self.incoming_decisions[op] = decision
            row.preload_masks[op] = decision.predicted
            row.channels_read[op] = decision.to_read
            row.preload_total_pairs += len(decision.predicted) * group.n_layers
            if not decision.to_read:
                continue
            t0 = time.perf_counter()
            raw, stats = self.store.read_channels(gid, op, decision.to_read)
            measured = time.perf_counter() - t0
            self.incoming_raw[op] = raw
            if self.real:
                # serialized real-I/O schedule: charge the measured read now
                self.clock += measured
                row.t_preload += measured
            else:
                durations = self._read_durations(stats)
                self.loader.enqueue(self.clock, durations, tag=gid)
                row.t_preload += sum(durations)
            row.bytes_preload += stats.total_bytes
            self.tracker.incoming_bytes += stats.total_bytes
            self.tracker.touch()

    # -- per-operator hook ----------------------------------------------------

    def op_apply(self, layer: int, op: OpType, x: np.ndarray, site_vec: np.ndarray) -> np.ndarray:
        gid = layer // self.group_size
        if gid != self.cur_group:
            self._enter_group(gid)
        group = self.store.groups[gid]
        site = OP_SITE[op]
        if layer == group.first_layer and site not in self.issued_sites:
            self.issued_sites.add(site)
            self._issue_preload(site, site_vec)
        row = self._row(gid)
        rows_dim, cols = self.spec.op_shape(op)
        cb = self.spec.channel_bytes(op)

        # T step: extract the mask from the actual activation
        t0 = time.perf_counter()
        mask = self.selector.select(op, site_vec)
        t_topk = (time.perf_counter() - t0) if self.real else cols * F32 / self.profile.bw_mem
        self.clock += t_topk
        row.t_topk += t_topk
        self.step_masks[(layer, op)] = mask

        hits, misses = cache_mod.access(self.cache, (layer, op), mask.indices)
        row.n_hit += len(hits)
        row.n_miss += len(misses)
        if op in self.cur_predicted:
            used = len(self.cur_predicted[op] & mask.as_set())
            row.preload_used_pairs += used
            row.used_by_op[op] = row.used_by_op.get(op, 0) + used

        held = self.buf.get((layer, op), {})
        resident = self.cache.tensors[(layer, op)].resident
        needed = on_demand_load(mask, held.keys(), resident)
        ond_vecs: dict[int, np.ndarray] = {}
        if needed:
            t0 = time.perf_counter()
            raw, stats = self.store.read_layer_channels(layer, op, needed)
            measured = time.perf_counter() - t0
            if self.real:
                self.clock += measured
                row.t_onload += measured
            else:
                durations = self._read_durations(stats)
                before = self.clock
                self.clock = self.loader.on_demand(self.clock, durations)
                gap = self.clock - before - sum(durations)
                row.ond_wait += gap
                self.bubble += gap
                row.t_onload += sum(durations)
            row.bytes_onload += stats.total_bytes
            row.onload[(layer, op)] = tuple(needed)
            for ch, blob in raw.items():
                ond_vecs[ch] = self.store.decode_channel(op, blob)
            self.tracker.group_bytes += stats.total_bytes
            self.tracker.touch()
        self.layer_ond.setdefault((layer, op), {}).update(ond_vecs)

        # C step: place each active column into a zero matrix, every channel
        # delivered by exactly one of cache / preload buffer / on-demand,
        # then run the shared full-width kernel on the zeroed input
        k = len(mask)
        t0 = time.perf_counter()
        matrix = np.zeros((rows_dim, cols), dtype=np.float32)
        for ch in mask.indices:
            if ch in resident:
                matrix[:, ch] = resident[ch]
            elif ch in held:
                matrix[:, ch] = held[ch]
            elif ch in ond_vecs:
                matrix[:, ch] = ond_vecs[ch]
            else:  # accounting identity violation
                raise InputError(f"channel {ch} of layer {layer} {op.value} has no source")
        y = masked_gemv(matrix, zeroed_vector(x, mask, cols))
        t_comp = (time.perf_counter() - t0) if self.real else k * cb / self.profile.bw_mem
        self.clock += t_comp
        row.t_comp += t_comp

        if op is OpType.DOWN:
            self._finish_layer(layer)
        return y

    def _finish_layer(self, layer: int) -> None:
        # everything loaded for this layer was paid for: offer it to the
        # cache, then release the per-layer slices
        freed = 0
        for op in OP_ORDER:
            key = (layer, op)
            held = self.buf.pop(key, {})
            ond = self.layer_ond.pop(key, {})
            cb = self.spec.channel_bytes(op)
            freed += (len(held) + len(ond)) * cb
            for ch in sorted(set(held) | set(ond)):
                vec = ond.get(ch) if ch in ond else held.get(ch)
                cache_mod.admit(self.cache, key, ch, vec)
        self.tracker.group_bytes -= freed
        self.tracker.cache_bytes = self.cache.resident_bytes()
        self.tracker.touch()

    # -- token loop ----------------------------------------------------------

    def run_token(self, index: int, token: int) -> tuple[int, TokenRecord, dict]:
        self.rows = {}
        self.cur_group = None
        self.buf = {}
        self.layer_ond = {}
        self.incoming_raw = {}
        self.incoming_decisions = {}
        self.cur_predicted = {}
        self.issued_sites = set()
        self.step_masks = {}
        self.bubble = 0.0
        self.tracker.token = index
        self.tracker.peak = self.tracker.current()
        start = self.clock
        hit0, miss0 = self.cache.n_hit, self.cache.n_miss

        logits, _ = self.decoder.step(token, self.op_apply)

        if self.loader.pending:
            raise InputError("loader queue not empty at token end")
        out = int(np.argmax(logits))
        rec = TokenRecord(
            index=index,
            token_in=token,
            token_out=out,
            wall_time=self.clock - start,
            bubble=self.bubble,
            peak_dram=self.tracker.peak,
            n_hit=self.cache.n_hit - hit0,
            n_miss=self.cache.n_miss - miss0,
            groups=[self.rows[g] for g in sorted(self.rows)],
        )
        return out, rec, self.step_masks


def decode(
    model: Model | None,
    store: PackedStore,
    cache_state: CacheState | None,
    plan: Plan,
    prompt: Sequence[int],
    n_tokens: int,
    profile: BandwidthModel | None = None,
    selector: MaskSelector | None = None,
) -> tuple[list[int], DecodeTrace]:
    """Run the swapping pipeline over a prompt plus greedy continuation.

    Emitted tokens depend only on the masks actually used, never on the
    timing mode, cache size, group size, or preload accuracy; the trace
    records those masks so an offline masked forward can replay the run
    bit-exactly. ``model`` supplies the resident embedding when given and
    must match the store's spec; otherwise the store's embedding is used.
    """
    spec = store.spec
    if plan.group_size != store.group_size:
        raise InputError(
            f"plan group size {plan.group_size} does not match store group size {store.group_size}"
        )
    if len(prompt) == 0:
        raise InputError("prompt must be non-empty")
    profile = profile or default_profile()
    selector = selector or MaskSelector.from_sparsity(spec, plan.sparsity)
    if cache_state is None:
        cache_state = cache_mod.make_cache(spec, budget_bytes=plan.m_cache)
    if model is not None:
        if model.spec.to_dict() != spec.to_dict():
            raise InputError("model spec does not match store spec")
        embedding = model.embedding
    else:
        embedding = store.read_embedding()

    run = _PipelineRun(store, cache_state, plan, selector, profile, embedding)
    trace = DecodeTrace(prompt_len=len(prompt), group_size=store.group_size, m_max=plan.m_max)
    out: list[int] = []
    sequence = list(prompt)
    next_tok: int | None = None
    for i in range(len(sequence) + n_tokens):
        tok = sequence[i] if i < len(sequence) else next_tok
        next_tok, rec, masks = run.run_token(i, int(tok))
        trace.tokens.append(rec)
        trace.step_masks.append(dict(masks))
        if i >= len(sequence) - 1 and len(out) < n_tokens:
            out.append(next_tok)
    return out, trace


# ---------------------------------------------------------------------------
# Aggregation
# ---------------------------------------------------------------------------


@dataclass
class RunReport:
    n_steps: int
    prompt_len: int
    total_time_s: float
    tokens_per_s: float
    hit_rate: float
    bytes_preload: int
    bytes_onload: int
    overlap_efficiency: float  # 1 - bubble / total
    peak_dram: int
    per_token: list[dict] = field(default_factory=list)


def timing_report(trace: DecodeTrace) -> RunReport:
    """Per-token decomposition plus run totals."""
    total = 0.0
    bubble = 0.0
    hits = 0
    misses = 0
    b_pre = 0
    b_ond = 0
    peak = 0
    per_token: list[dict] = []
    for rec in trace.tokens:
        total += rec.wall_time
        bubble += rec.bubble
        hits += rec.n_hit
        misses += rec.n_miss
        peak = max(peak, rec.peak_dram)
        row = {
            "token": rec.index,
            "wall_s": rec.wall_time,
            "t_load_s": rec.groups[0].t_onload if rec.groups else 0.0,
            "t_onload_rest_s": sum(g.t_onload for g in rec.groups[1:]),
            "t_comp_s": sum(g.t_comp for g in rec.groups),
            "t_topk_s": sum(g.t_topk for g in rec.groups),
            "t_preload_s": sum(g.t_preload for g in rec.groups),
            "bubble_s": rec.bubble,
            "bytes_preload": sum(g.bytes_preload for g in rec.groups),
            "bytes_onload": sum(g.bytes_onload for g in rec.groups),
            "n_hit": rec.n_hit,
            "n_miss": rec.n_miss,
            "peak_dram": rec.peak_dram,
        }
        b_pre += row["bytes_preload"]
        b_ond += row["bytes_onload"]
        per_token.append(row)
    n = len(trace.tokens)
    return RunReport(
        n_steps=n,
        prompt_len=trace.prompt_len,
        total_time_s=total,
        tokens_per_s=(n / total) if total > 0 else 0.0,
        hit_rate=hits / (hits + misses) if hits + misses else 0.0,
        bytes_preload=b_pre,
        bytes_onload=b_ond,
        overlap_efficiency=1.0 - (bubble / total) if total > 0 else 1.0,
        peak_dram=peak,
        per_token=per_token,
    )

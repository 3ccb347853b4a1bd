"""Packed on-flash weight store ("AWSP") and the read-timing model.

Inside each group of N consecutive layers, weights are reordered by
channel id, then layer id, then operator type: channel c of an operator
occupies N contiguous per-layer slots, so fetching one channel for every
layer of the group is a single contiguous read of N * channel_bytes.

File layout (little-endian):

    magic "AWSP" | version u32 | header_len u64 | header JSON | payload

The header JSON carries the model spec, the group size and the layout
table; payload offsets are relative to the payload start. The embedding
table is stored dense at the front of the payload (it is never swapped).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, InputError, StoreError
from .model import (
    OP_ORDER,
    Model,
    ModelSpec,
    OpType,
    WeightTensor,
    decode_channel_bytes,
)

MAGIC = b"AWSP"
VERSION = 1

REAL_IO = "real"
SIMULATED = "sim"


@dataclass
class BandwidthModel:
    """Chunk-size dependent flash throughput plus a fixed per-request latency.

    Lookup uses the largest table key <= the requested chunk size; chunks
    below the smallest key fall back to the smallest entry (conservative
    floor rule, no interpolation).
    """

    table: list[tuple[int, float]]  # (chunk bytes, bytes/s), ascending
    bw_mem: float
    req_latency_s: float = 0.0

    def __post_init__(self):
        self.table = sorted((int(c), float(t)) for c, t in self.table)
        if not self.table:
            raise InputError("bandwidth table is empty")
        last = 0.0
        for chunk, thr in self.table:
            if thr <= 0:
                raise InputError("throughput entries must be positive")
            if thr < last:
                raise InputError("throughput must be non-decreasing with chunk size")
            last = thr
        if self.bw_mem <= 0:
            raise InputError("memory bandwidth must be positive")
        if self.req_latency_s < 0:
            raise InputError("request latency must be non-negative")

    def throughput(self, chunk_size: int) -> float:
        best = self.table[0][1]
        for chunk, thr in self.table:
            if chunk <= chunk_size:
                best = thr
            else:
                break
        return best

    def to_json(self, path) -> None:
        doc = {
            "bw_table": [[c, t] for c, t in self.table],
            "bw_mem": self.bw_mem,
            "req_latency_s": self.req_latency_s,
        }
        with open(path, "w") as fh:
            json.dump(doc, fh, indent=2, sort_keys=True)
            fh.write("\n")

    @staticmethod
    def from_json(path) -> "BandwidthModel":
        try:
            with open(path) as fh:
                doc = json.load(fh)
        except (OSError, json.JSONDecodeError) as e:
            raise FormatError(f"cannot read device profile {path}: {e}") from e
        return BandwidthModel(
            table=[(int(c), float(t)) for c, t in doc["bw_table"]],
            bw_mem=float(doc["bw_mem"]),
            req_latency_s=float(doc.get("req_latency_s", 0.0)),
        )


def default_profile() -> BandwidthModel:
    """Stand-in UFS-4.0-class device: 5.8 GB/s peak at >=256 KiB chunks."""
    return BandwidthModel(
        table=[(4096, 200e6), (16384, 900e6), (65536, 3.6e9), (262144, 5.8e9)],
        bw_mem=8e9,
        req_latency_s=80e-6,
    )


@dataclass
class ReadStats:
    """Per-call request accounting; never shared between callers."""

    chunk_sizes: list[int] = field(default_factory=list)

    @property
    def n_requests(self) -> int:
        return len(self.chunk_sizes)

    @property
    def total_bytes(self) -> int:
        return sum(self.chunk_sizes)

    def extend(self, other: "ReadStats") -> None:
        self.chunk_sizes.extend(other.chunk_sizes)


def simulate_read_time(stats: ReadStats, bw: BandwidthModel) -> float:
    """Sum over requests of (latency + bytes / throughput(chunk))."""
    return sum(bw.req_latency_s + size / bw.throughput(size) for size in stats.chunk_sizes)


@dataclass
class GroupLayout:
    group_id: int
    first_layer: int
    n_layers: int  # actual layer count; the last group may be partial
    op_offsets: dict[OpType, int]
    op_strides: dict[OpType, int]  # bytes per channel = n_layers * channel_bytes

    def to_dict(self) -> dict:
        return {
            "group_id": self.group_id,
            "first_layer": self.first_layer,
            "n_layers": self.n_layers,
            "op_offsets": {op.value: off for op, off in self.op_offsets.items()},
            "op_strides": {op.value: s for op, s in self.op_strides.items()},
        }

    @staticmethod
    def from_dict(d: dict) -> "GroupLayout":
        return GroupLayout(
            group_id=int(d["group_id"]),
            first_layer=int(d["first_layer"]),
            n_layers=int(d["n_layers"]),
            op_offsets={OpType(k): int(v) for k, v in d["op_offsets"].items()},
            op_strides={OpType(k): int(v) for k, v in d["op_strides"].items()},
        )


def _merge_ranges(ranges: list[tuple[int, int, object]]) -> list[tuple[int, int, list]]:
    """Coalesce byte-adjacent (offset, nbytes, key) ranges into requests.

    Only exact adjacency merges; gaps always split requests so the stats
    stay analyzable.
    """
    out: list[tuple[int, int, list]] = []
    for off, n, key in sorted(ranges, key=lambda r: r[0]):
        if out and out[-1][0] + out[-1][1] == off:
            prev_off, prev_n, keys = out.pop()
            out.append((prev_off, prev_n + n, keys + [(off, n, key)]))
        else:
            out.append((off, n, [(off, n, key)]))
    return out


class PackedStore:
    """Read access to a packed file; safe for concurrent readers."""

    def __init__(self, path, mode: str = SIMULATED):
        if mode not in (REAL_IO, SIMULATED):
            raise InputError(f"unknown store mode {mode!r}")
        self.path = Path(path)
        self.mode = mode
        try:
            with open(self.path, "rb") as fh:
                head = fh.read(16)
                if len(head) < 16 or head[:4] != MAGIC:
                    raise FormatError(f"{self.path} is not an AWSP file")
                (version,) = struct.unpack("<I", head[4:8])
                if version != VERSION:
                    raise FormatError(f"unsupported AWSP version {version}")
                (header_len,) = struct.unpack("<Q", head[8:16])
                header = json.loads(fh.read(header_len).decode("utf-8"))
                self._payload_start = 16 + header_len
                if mode == SIMULATED:
                    self._buf = fh.read()
                    self._fh = None
                else:
                    self._buf = None
                    self._fh = open(self.path, "rb")
        except OSError as e:
            raise StoreError(f"cannot open store {self.path}: {e}") from e
        self.spec = ModelSpec.from_dict(header["spec"])
        self.group_size = int(header["group_size"])
        self.groups = [GroupLayout.from_dict(g) for g in header["groups"]]
        self._embedding_offset = int(header["embedding"]["offset"])
        self._embedding_nbytes = int(header["embedding"]["nbytes"])
        self._payload_len = int(header["payload_len"])

    @property
    def n_groups(self) -> int:
        return len(self.groups)

    def group_of_layer(self, layer: int) -> GroupLayout:
        if not (0 <= layer < self.spec.n_layers):
            raise InputError(f"layer {layer} out of range")
        return self.groups[layer // self.group_size]

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def _read_at(self, offset: int, nbytes: int) -> bytes:
        if offset < 0 or offset + nbytes > self._payload_len:
            raise StoreError(f"read [{offset}, {offset + nbytes}) outside payload")
        if self._buf is not None:
            return self._buf[offset : offset + nbytes]
        self._fh.seek(self._payload_start + offset)
        data = self._fh.read(nbytes)
        if len(data) != nbytes:
            raise StoreError(f"short read at offset {offset}: got {len(data)} of {nbytes}")
        return data

    def _execute(self, ranges: list[tuple[int, int, object]]) -> tuple[dict, ReadStats]:
        stats = ReadStats()
        out: dict = {}
        for off, n, parts in _merge_ranges(ranges):
            stats.chunk_sizes.append(n)
            blob = self._read_at(off, n)
            for part_off, part_n, key in parts:
                rel = part_off - off
                out[key] = blob[rel : rel + part_n]
        return out, stats

    def read_channels(
        self, group_id: int, op: OpType, channel_ids
    ) -> tuple[dict[int, bytes], ReadStats]:
        """Cross-layer reads: each channel's bytes cover every layer of the
        group. Byte-adjacent channels are merged into one request."""
        if not (0 <= group_id < len(self.groups)):
            raise InputError(f"group {group_id} out of range")
        g = self.groups[group_id]
        stride = g.op_strides[op]
        _, cols = self.spec.op_shape(op)
        ranges = []
        for ch in sorted(int(c) for c in set(channel_ids)):
            if not (0 <= ch < cols):
                raise InputError(f"channel {ch} out of range for {op.value}")
            ranges.append((g.op_offsets[op] + ch * stride, stride, ch))
        return self._execute(ranges)

    def read_layer_channels(
        self, layer: int, op: OpType, channel_ids
    ) -> tuple[dict[int, bytes], ReadStats]:
        """Single-layer reads (the on-demand path). In the reordered layout
        the per-layer slices of neighbouring channels are not adjacent
        unless the group size is 1, so these stay small requests."""
        g = self.group_of_layer(layer)
        cb = self.spec.channel_bytes(op)
        stride = g.op_strides[op]
        _, cols = self.spec.op_shape(op)
        base = g.op_offsets[op] + (layer - g.first_layer) * cb
        ranges = []
        for ch in sorted(int(c) for c in set(channel_ids)):
            if not (0 <= ch < cols):
                raise InputError(f"channel {ch} out of range for {op.value}")
            ranges.append((base + ch * stride, cb, ch))
        return self._execute(ranges)

    def read_embedding(self) -> np.ndarray:
        raw = self._read_at(self._embedding_offset, self._embedding_nbytes)
        return (
            np.frombuffer(raw, dtype="<f4")
            .reshape(self.spec.vocab_size, self.spec.hidden_dim)
            .astype(np.float32)
        )

    def decode_run(self, op: OpType, raw: bytes, n_layers: int) -> np.ndarray:
        """Decode one cross-layer channel read to (n_layers, rows) float32."""
        rows, _ = self.spec.op_shape(op)
        cb = self.spec.channel_bytes(op)
        if len(raw) != cb * n_layers:
            raise FormatError(f"run payload is {len(raw)} bytes, expected {cb * n_layers}")
        return np.stack(
            [decode_channel_bytes(raw[i * cb : (i + 1) * cb], rows, self.spec.dtype) for i in range(n_layers)]
        )

    def decode_channel(self, op: OpType, raw: bytes) -> np.ndarray:
        rows, _ = self.spec.op_shape(op)
        return decode_channel_bytes(raw, rows, self.spec.dtype)


def pack(model: Model, group_size: int, path) -> None:
    """Write the packed store for a model.

    The payload walks groups in order; within a group, operators in the
    fixed op order; within an operator, channels ascending, each channel
    holding its per-layer slices ordered by layer. Quantization scales
    travel inside each per-layer channel slice.
    """
    spec = model.spec
    if not (1 <= group_size <= spec.n_layers):
        raise InputError(f"group size {group_size} outside [1, {spec.n_layers}]")
    groups: list[GroupLayout] = []
    offset = 0
    emb = np.ascontiguousarray(model.embedding, dtype=np.float32).astype("<f4").tobytes()
    embedding_entry = {"offset": offset, "nbytes": len(emb)}
    offset += len(emb)
    for gid in range(0, (spec.n_layers + group_size - 1) // group_size):
        first = gid * group_size
        n_in_group = min(group_size, spec.n_layers - first)
        op_offsets: dict[OpType, int] = {}
        op_strides: dict[OpType, int] = {}
        for op in OP_ORDER:
            _, cols = spec.op_shape(op)
            cb = spec.channel_bytes(op)
            op_offsets[op] = offset
            op_strides[op] = n_in_group * cb
            offset += cols * n_in_group * cb
        groups.append(GroupLayout(gid, first, n_in_group, op_offsets, op_strides))
    header = {
        "spec": spec.to_dict(),
        "group_size": group_size,
        "groups": [g.to_dict() for g in groups],
        "embedding": embedding_entry,
        "payload_len": offset,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    try:
        with open(path, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<I", VERSION))
            fh.write(struct.pack("<Q", len(header_bytes)))
            fh.write(header_bytes)
            fh.write(emb)
            for g in groups:
                for op in OP_ORDER:
                    _, cols = spec.op_shape(op)
                    for ch in range(cols):
                        for layer in range(g.first_layer, g.first_layer + g.n_layers):
                            fh.write(model.tensor(layer, op).channel_to_bytes(ch))
    except OSError as e:
        raise StoreError(f"cannot write store {path}: {e}") from e


def open_store(path, mode: str = SIMULATED) -> PackedStore:
    return PackedStore(path, mode=mode)


def unpack(store: PackedStore) -> Model:
    """Reconstruct the full model from a packed store, bit-exactly."""
    spec = store.spec
    tensors: dict[tuple[int, OpType], WeightTensor] = {}
    for g in store.groups:
        for op in OP_ORDER:
            _, cols = spec.op_shape(op)
            cb = spec.channel_bytes(op)
            raw_by_ch, _ = store.read_channels(g.group_id, op, range(cols))
            for rel_layer in range(g.n_layers):
                layer = g.first_layer + rel_layer
                payload = b"".join(
                    raw_by_ch[ch][rel_layer * cb : (rel_layer + 1) * cb] for ch in range(cols)
                )
                rows, _ = spec.op_shape(op)
                tensors[(layer, op)] = WeightTensor.from_payload(layer, op, rows, cols, spec.dtype, payload)
    return Model(spec, store.read_embedding(), tensors)

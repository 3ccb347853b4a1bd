"""Toy decoder-only transformer with channel-addressable weights.

The model is deliberately small but Llama-shaped: pre-RMSNorm, multi-head
attention, SwiGLU FFN, residual connections, tied embedding/unembedding.
Each layer owns seven linear operators (Q, K, V, O, GATE, UP, DOWN) whose
matrices are the only swappable state; everything else (embedding, norms)
is considered permanently resident.

A *channel* is one input column of an operator matrix: the slice of
weights multiplied by a single element of the operator's input vector.
Masking a channel means treating that input element as exactly zero and
skipping its GEMV contribution.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .errors import FormatError, InputError, SpecError
from .quant import (
    BLOCK,
    channel_bytes_q4,
    dequantize_q4,
    pack_channel_q4,
    quantize_q4,
    unpack_channel_q4,
)

MANIFEST_FORMAT = "swapflow-model"
MANIFEST_VERSION = 1
RMS_EPS = np.float32(1e-6)


class OpType(str, Enum):
    Q = "q"
    K = "k"
    V = "v"
    O = "o"
    GATE = "gate"
    UP = "up"
    DOWN = "down"


class Site(str, Enum):
    ATTN_IN = "attn_in"
    FFN_IN = "ffn_in"
    DOWN_IN = "down_in"


# Fixed operator order: used identically for serialization, cache keys and
# the packed store layout. Never reorder.
OP_ORDER: tuple[OpType, ...] = (
    OpType.Q,
    OpType.K,
    OpType.V,
    OpType.O,
    OpType.GATE,
    OpType.UP,
    OpType.DOWN,
)

# Activation site whose magnitudes select each operator's channels. The O
# projection has no traced site of its own (its true input is the attention
# context); ATTN_IN serves as its selector, which shares the index space.
OP_SITE: dict[OpType, Site] = {
    OpType.Q: Site.ATTN_IN,
    OpType.K: Site.ATTN_IN,
    OpType.V: Site.ATTN_IN,
    OpType.O: Site.ATTN_IN,
    OpType.GATE: Site.FFN_IN,
    OpType.UP: Site.FFN_IN,
    OpType.DOWN: Site.DOWN_IN,
}

F32_BYTES = 4


@dataclass(frozen=True)
class ModelSpec:
    """Topology of the toy transformer; fully determines all tensor shapes."""

    n_layers: int
    hidden_dim: int
    ffn_dim: int
    n_heads: int
    vocab_size: int
    dtype: str = "f32"
    seed: int = 0

    def __post_init__(self):
        if min(self.n_layers, self.hidden_dim, self.ffn_dim, self.n_heads, self.vocab_size) <= 0:
            raise SpecError("all model dimensions must be positive")
        if self.hidden_dim % self.n_heads != 0:
            raise SpecError(
                f"hidden_dim ({self.hidden_dim}) not divisible by n_heads ({self.n_heads})"
            )
        if self.dtype not in ("f32", "q4b32"):
            raise SpecError(f"unknown dtype {self.dtype!r}")
        if self.dtype == "q4b32" and (self.hidden_dim % BLOCK or self.ffn_dim % BLOCK):
            raise SpecError("q4b32 requires hidden_dim and ffn_dim divisible by 32")

    @property
    def head_dim(self) -> int:
        return self.hidden_dim // self.n_heads

    def op_shape(self, op: OpType) -> tuple[int, int]:
        """(rows, cols) of an operator matrix; cols is the channel count."""
        h, f = self.hidden_dim, self.ffn_dim
        if op in (OpType.Q, OpType.K, OpType.V, OpType.O):
            return h, h
        if op in (OpType.GATE, OpType.UP):
            return f, h
        return h, f  # DOWN

    def site_dim(self, site: Site) -> int:
        return self.ffn_dim if site is Site.DOWN_IN else self.hidden_dim

    def channel_bytes(self, op: OpType) -> int:
        rows, _ = self.op_shape(op)
        if self.dtype == "f32":
            return rows * F32_BYTES
        return channel_bytes_q4(rows)

    def layer_bytes(self) -> int:
        return sum(self.channel_bytes(op) * self.op_shape(op)[1] for op in OP_ORDER)

    def model_bytes(self) -> int:
        return self.layer_bytes() * self.n_layers

    def to_dict(self) -> dict:
        return {
            "n_layers": self.n_layers,
            "hidden_dim": self.hidden_dim,
            "ffn_dim": self.ffn_dim,
            "n_heads": self.n_heads,
            "vocab_size": self.vocab_size,
            "dtype": self.dtype,
            "seed": self.seed,
            "op_types": [op.value for op in OP_ORDER],
        }

    @staticmethod
    def from_dict(d: dict) -> "ModelSpec":
        ops = d.get("op_types")
        if ops is not None and [OpType(o) for o in ops] != list(OP_ORDER):
            raise FormatError("manifest operator order does not match the fixed op order")
        return ModelSpec(
            n_layers=int(d["n_layers"]),
            hidden_dim=int(d["hidden_dim"]),
            ffn_dim=int(d["ffn_dim"]),
            n_heads=int(d["n_heads"]),
            vocab_size=int(d["vocab_size"]),
            dtype=str(d["dtype"]),
            seed=int(d["seed"]),
        )


@dataclass
class WeightTensor:
    """One operator matrix. ``data`` always holds the float32 compute values
    (for q4b32 these are the exactly-dequantized codes)."""

    layer: int
    op: OpType
    rows: int
    cols: int
    dtype: str
    data: np.ndarray
    codes: np.ndarray | None = None  # int8 (rows, cols), q4b32 only
    scales: np.ndarray | None = None  # float32 (rows//32, cols), q4b32 only

    @property
    def channel_bytes(self) -> int:
        return rows_to_channel_bytes(self.rows, self.dtype)

    def channel(self, c: int) -> np.ndarray:
        return np.ascontiguousarray(self.data[:, c])

    def channel_to_bytes(self, c: int) -> bytes:
        if self.dtype == "f32":
            return np.ascontiguousarray(self.data[:, c]).astype("<f4").tobytes()
        return pack_channel_q4(self.codes[:, c], self.scales[:, c])

    def to_payload(self) -> bytes:
        return b"".join(self.channel_to_bytes(c) for c in range(self.cols))

    @staticmethod
    def from_payload(layer: int, op: OpType, rows: int, cols: int, dtype: str, raw: bytes) -> "WeightTensor":
        cb = rows_to_channel_bytes(rows, dtype)
        if len(raw) != cb * cols:
            raise FormatError(f"tensor payload is {len(raw)} bytes, expected {cb * cols}")
        if dtype == "f32":
            data = np.frombuffer(raw, dtype="<f4").reshape(cols, rows).T
            return WeightTensor(layer, op, rows, cols, dtype, np.ascontiguousarray(data, dtype=np.float32))
        codes = np.empty((rows, cols), dtype=np.int8)
        scales = np.empty((rows // BLOCK, cols), dtype=np.float32)
        for c in range(cols):
            codes[:, c], scales[:, c] = unpack_channel_q4(raw[c * cb : (c + 1) * cb], rows)
        return WeightTensor(layer, op, rows, cols, dtype, dequantize_q4(codes, scales), codes, scales)


def rows_to_channel_bytes(rows: int, dtype: str) -> int:
    return rows * F32_BYTES if dtype == "f32" else channel_bytes_q4(rows)


def decode_channel_bytes(raw: bytes, rows: int, dtype: str) -> np.ndarray:
    """Decode one serialized channel back to its float32 compute values."""
    if dtype == "f32":
        if len(raw) != rows * F32_BYTES:
            raise FormatError(f"f32 channel payload is {len(raw)} bytes, expected {rows * F32_BYTES}")
        return np.frombuffer(raw, dtype="<f4").astype(np.float32)
    codes, scales = unpack_channel_q4(raw, rows)
    return dequantize_q4(codes[:, None], scales[:, None])[:, 0]


@dataclass
class Model:
    spec: ModelSpec
    embedding: np.ndarray  # (vocab, hidden) float32, tied unembedding
    tensors: dict[tuple[int, OpType], WeightTensor]
    weight_scale: float | None = None

    def tensor(self, layer: int, op: OpType) -> WeightTensor:
        return self.tensors[(layer, op)]


def gen_model(spec: ModelSpec, weight_scale: float) -> Model:
    """Deterministically generate a synthetic model.

    Operator weights are i.i.d. normal with std ``weight_scale / sqrt(hidden_dim)``
    so that for weight_scale < 1 the residual stream dominates each block's
    output. The embedding is always unit-scale (independent of weight_scale)
    so the residual stream is never degenerate.
    """
    if weight_scale < 0:
        raise SpecError("weight_scale must be non-negative")
    rng = np.random.default_rng(spec.seed)
    embedding = rng.standard_normal((spec.vocab_size, spec.hidden_dim), dtype=np.float32)
    std = np.float32(weight_scale / np.sqrt(spec.hidden_dim))
    tensors: dict[tuple[int, OpType], WeightTensor] = {}
    for layer in range(spec.n_layers):
        for op in OP_ORDER:
            rows, cols = spec.op_shape(op)
            data = rng.standard_normal((rows, cols), dtype=np.float32) * std
            if spec.dtype == "q4b32":
                codes, scales = quantize_q4(data)
                tensors[(layer, op)] = WeightTensor(
                    layer, op, rows, cols, "q4b32", dequantize_q4(codes, scales), codes, scales
                )
            else:
                tensors[(layer, op)] = WeightTensor(layer, op, rows, cols, "f32", data)
    return Model(spec, embedding, tensors, weight_scale=weight_scale)


# ---------------------------------------------------------------------------
# Forward pass
# ---------------------------------------------------------------------------

# An op hook computes one operator application. It receives the operator's
# actual input vector plus the activation at the operator's selector site
# (identical for every op except O, whose selector is ATTN_IN).
OpApply = Callable[[int, OpType, np.ndarray, np.ndarray], np.ndarray]


def rms_norm(x: np.ndarray) -> np.ndarray:
    denom = np.sqrt(np.mean(x * x) + RMS_EPS)
    return (x / denom).astype(np.float32)


def silu(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = x[pos] / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = x[~pos] * ex / (1.0 + ex)
    return out.astype(np.float32)


def _softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return (e / e.sum(axis=axis, keepdims=True)).astype(np.float32)


def zeroed_vector(x: np.ndarray, mask, dim: int) -> np.ndarray:
    """Copy of ``x`` with every masked-out element set to exactly zero."""
    idx = _mask_indices(mask, dim)
    z = np.zeros(dim, dtype=np.float32)
    if idx.size:
        z[idx] = x[idx]
    return z


def masked_gemv(matrix: np.ndarray, x_zeroed: np.ndarray) -> np.ndarray:
    """The one GEMV kernel shared by every masked path.

    Masking works by zeroing input elements, never by skipping columns:
    a gathered (rows, k) product sums in a different order than the dense
    product and drifts at the last ulp, while a full-width product over a
    zeroed input is summation-order independent of the mask. The cost
    model charges only active bytes; this kernel is about numerics.
    """
    return np.ascontiguousarray(matrix) @ np.ascontiguousarray(x_zeroed)


def _mask_indices(mask, dim: int) -> np.ndarray:
    indices = getattr(mask, "indices", mask)
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= dim):
        raise InputError(f"mask index out of range for input dimension {dim}")
    return idx


def dense_apply(model: Model) -> OpApply:
    def apply(layer: int, op: OpType, x: np.ndarray, site: np.ndarray) -> np.ndarray:
        return model.tensor(layer, op).data @ x

    return apply


def masked_apply(model: Model, masks_for_step: Mapping) -> OpApply:
    """Zero masked-out input elements per operator, then apply densely.
    Missing entries mean dense."""

    def apply(layer: int, op: OpType, x: np.ndarray, site: np.ndarray) -> np.ndarray:
        t = model.tensor(layer, op)
        mask = masks_for_step.get((layer, op)) if masks_for_step is not None else None
        if mask is None:
            return t.data @ x
        return masked_gemv(t.data, zeroed_vector(x, mask, t.cols))

    return apply


class Decoder:
    """Stateful single-token decoder with a per-layer KV cache.

    The same engine backs the dense reference, the masked oracle and the
    swapping pipeline; they differ only in the injected op hook, which
    pins down bit-exact agreement of everything around the GEMVs.
    """

    def __init__(self, model: Model):
        self.model = model
        self.spec = model.spec
        self._k: list[list[np.ndarray]] = [[] for _ in range(model.spec.n_layers)]
        self._v: list[list[np.ndarray]] = [[] for _ in range(model.spec.n_layers)]

    def clone(self) -> "Decoder":
        other = Decoder(self.model)
        other._k = [list(ks) for ks in self._k]
        other._v = [list(vs) for vs in self._v]
        return other

    def _attend(self, layer: int, q: np.ndarray) -> np.ndarray:
        spec = self.spec
        qh = q.reshape(spec.n_heads, spec.head_dim)
        keys = np.stack(self._k[layer])  # (t, heads, head_dim)
        vals = np.stack(self._v[layer])
        scores = np.einsum("thd,hd->ht", keys, qh) / np.float32(np.sqrt(spec.head_dim))
        w = _softmax(scores.astype(np.float32), axis=1)
        ctx = np.einsum("ht,thd->hd", w, vals)
        return np.ascontiguousarray(ctx.reshape(spec.hidden_dim), dtype=np.float32)

    def step(
        self,
        token_id: int,
        op_apply: OpApply,
        block_stats: list | None = None,
    ) -> tuple[np.ndarray, dict[tuple[int, Site], np.ndarray]]:
        spec = self.spec
        if not (0 <= token_id < spec.vocab_size):
            raise InputError(f"token id {token_id} outside vocabulary of size {spec.vocab_size}")
        x = self.model.embedding[token_id].copy()
        sites: dict[tuple[int, Site], np.ndarray] = {}
        for layer in range(spec.n_layers):
            a = rms_norm(x)
            sites[(layer, Site.ATTN_IN)] = a
            q = op_apply(layer, OpType.Q, a, a)
            k = op_apply(layer, OpType.K, a, a)
            v = op_apply(layer, OpType.V, a, a)
            self._k[layer].append(k.reshape(spec.n_heads, spec.head_dim))
            self._v[layer].append(v.reshape(spec.n_heads, spec.head_dim))
            ctx = self._attend(layer, q)
            o = op_apply(layer, OpType.O, ctx, a)
            if block_stats is not None:
                block_stats.append((layer, "attn", float(np.linalg.norm(o)), float(np.linalg.norm(x))))
            x = x + o
            f = rms_norm(x)
            sites[(layer, Site.FFN_IN)] = f
            g = op_apply(layer, OpType.GATE, f, f)
            u = op_apply(layer, OpType.UP, f, f)
            h = (silu(g) * u).astype(np.float32)
            sites[(layer, Site.DOWN_IN)] = h
            d = op_apply(layer, OpType.DOWN, h, h)
            if block_stats is not None:
                block_stats.append((layer, "ffn", float(np.linalg.norm(d)), float(np.linalg.norm(x))))
            x = x + d
        logits = self.model.embedding @ x
        if not np.all(np.isfinite(logits)):
            raise InputError("non-finite logits produced by forward pass")
        return logits.astype(np.float32), sites


@dataclass
class ActivationTrace:
    """Per-step, per-layer, per-site activations recorded by a forward pass."""

    steps: list[dict[tuple[int, Site], np.ndarray]] = field(default_factory=list)

    @property
    def n_steps(self) -> int:
        return len(self.steps)

    def site(self, step: int, layer: int, site: Site) -> np.ndarray:
        return self.steps[step][(layer, site)]

    def write_csv(self, path, step: int = -1) -> None:
        """Golden format: layer, site, index, value for one chosen step."""
        sites = self.steps[step]
        with open(path, "w") as fh:
            fh.write("layer,site,index,value\n")
            for (layer, site) in sorted(sites, key=lambda k: (k[0], k[1].value)):
                vec = sites[(layer, site)]
                for i, v in enumerate(vec):
                    fh.write(f"{layer},{site.value},{i},{float(v)!r}\n")

    def write_multi_csv(self, path) -> None:
        """All steps, with a leading step column (calibration trace format)."""
        with open(path, "w") as fh:
            fh.write("step,layer,site,index,value\n")
            for step, sites in enumerate(self.steps):
                for (layer, site) in sorted(sites, key=lambda k: (k[0], k[1].value)):
                    for i, v in enumerate(sites[(layer, site)]):
                        fh.write(f"{step},{layer},{site.value},{i},{float(v)!r}\n")

    @staticmethod
    def read_multi_csv(path) -> "ActivationTrace":
        import csv as _csv

        rows: dict[tuple[int, int, Site], dict[int, float]] = {}
        try:
            with open(path, newline="") as fh:
                for row in _csv.DictReader(fh):
                    key = (int(row["step"]), int(row["layer"]), Site(row["site"]))
                    rows.setdefault(key, {})[int(row["index"])] = float(row["value"])
        except (OSError, KeyError, ValueError) as e:
            raise FormatError(f"cannot read activation trace {path}: {e}") from e
        if not rows:
            raise FormatError(f"activation trace {path} is empty")
        trace = ActivationTrace()
        n_steps = max(k[0] for k in rows) + 1
        for step in range(n_steps):
            sites: dict[tuple[int, Site], np.ndarray] = {}
            for (s, layer, site), vals in rows.items():
                if s != step:
                    continue
                vec = np.zeros(max(vals) + 1, dtype=np.float32)
                for i, v in vals.items():
                    vec[i] = v
                sites[(layer, site)] = vec
            trace.steps.append(sites)
        return trace


def forward_dense(model: Model, token_ids: Sequence[int]) -> tuple[np.ndarray, ActivationTrace]:
    """Run the dense model over a token sequence.

    Returns logits for every step (the last row is the final logits) and
    the full activation trace consumed by the sparsity analyses.
    """
    if len(token_ids) == 0:
        raise InputError("token sequence must be non-empty")
    dec = Decoder(model)
    apply = dense_apply(model)
    logits_rows = []
    trace = ActivationTrace()
    for tok in token_ids:
        logits, sites = dec.step(int(tok), apply)
        logits_rows.append(logits)
        trace.steps.append(sites)
    return np.stack(logits_rows), trace


def forward_sparse(
    model: Model,
    token_ids: Sequence[int],
    masks: Mapping | Sequence[Mapping],
) -> np.ndarray:
    """Masked forward: identical to forward_dense after zeroing masked-out
    activation elements per operator. ``masks`` is one mapping
    (layer, op) -> active indices applied to every step, or one mapping per
    step.
    """
    if len(token_ids) == 0:
        raise InputError("token sequence must be non-empty")
    per_step = isinstance(masks, (list, tuple))
    if per_step and len(masks) != len(token_ids):
        raise InputError("per-step masks must match the number of tokens")
    dec = Decoder(model)
    logits_rows = []
    for i, tok in enumerate(token_ids):
        step_masks = masks[i] if per_step else masks
        logits, _ = dec.step(int(tok), masked_apply(model, step_masks))
        logits_rows.append(logits)
    return np.stack(logits_rows)


def decode_greedy(
    model: Model,
    prompt: Sequence[int],
    n_tokens: int,
    masks_per_step: Sequence[Mapping] | None = None,
) -> tuple[list[int], np.ndarray, ActivationTrace]:
    """Greedy continuation. Prompt tokens are forced; the following
    ``n_tokens`` are argmax feedback. Masks, when given, cover every step
    (prompt steps included)."""
    if len(prompt) == 0:
        raise InputError("prompt must be non-empty")
    dec = Decoder(model)
    trace = ActivationTrace()
    logits_rows = []
    out: list[int] = []
    sequence = list(prompt)
    total = len(sequence) + n_tokens
    if masks_per_step is not None and len(masks_per_step) != total:
        raise InputError("masks_per_step must cover prompt and generated steps")
    for i in range(total):
        tok = sequence[i] if i < len(sequence) else out_tok
        step_masks = masks_per_step[i] if masks_per_step is not None else None
        apply = masked_apply(model, step_masks) if step_masks is not None else dense_apply(model)
        logits, sites = dec.step(int(tok), apply)
        logits_rows.append(logits)
        trace.steps.append(sites)
        out_tok = int(np.argmax(logits))
        if i >= len(sequence) - 1 and len(out) < n_tokens:
            out.append(out_tok)
    return out, np.stack(logits_rows), trace


def residual_output_ratio(model: Model, token_ids: Sequence[int]) -> float:
    """Mean ||block_output|| / ||residual_input|| over layers and steps."""
    dec = Decoder(model)
    apply = dense_apply(model)
    stats: list = []
    for tok in token_ids:
        dec.step(int(tok), apply, block_stats=stats)
    ratios = [out / max(res, 1e-30) for (_, _, out, res) in stats]
    return float(np.mean(ratios))


# ---------------------------------------------------------------------------
# Model container: JSON manifest + little-endian raw payload
# ---------------------------------------------------------------------------


def save_model(model: Model, manifest_path) -> None:
    manifest_path = Path(manifest_path)
    payload_path = manifest_path.with_suffix(".bin")
    entries = []
    blobs = []
    offset = 0
    emb = np.ascontiguousarray(model.embedding, dtype=np.float32).astype("<f4").tobytes()
    entries.append(
        {
            "name": "embedding",
            "rows": model.spec.vocab_size,
            "cols": model.spec.hidden_dim,
            "offset": offset,
            "nbytes": len(emb),
        }
    )
    blobs.append(emb)
    offset += len(emb)
    for layer in range(model.spec.n_layers):
        for op in OP_ORDER:
            t = model.tensor(layer, op)
            raw = t.to_payload()
            entries.append(
                {
                    "name": f"layer{layer}.{op.value}",
                    "layer": layer,
                    "op": op.value,
                    "rows": t.rows,
                    "cols": t.cols,
                    "offset": offset,
                    "nbytes": len(raw),
                }
            )
            blobs.append(raw)
            offset += len(raw)
    manifest = {
        "format": MANIFEST_FORMAT,
        "version": MANIFEST_VERSION,
        "spec": model.spec.to_dict(),
        "payload": payload_path.name,
        "tensors": entries,
    }
    if model.weight_scale is not None:
        manifest["meta"] = {"weight_scale": model.weight_scale}
    with open(manifest_path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(payload_path, "wb") as fh:
        for blob in blobs:
            fh.write(blob)


def load_spec(manifest_path) -> ModelSpec:
    """Read just the spec from a manifest, without the payload."""
    try:
        with open(manifest_path) as fh:
            manifest = json.load(fh)
    except (OSError, json.JSONDecodeError) as e:
        raise FormatError(f"cannot read manifest {manifest_path}: {e}") from e
    if manifest.get("format") != MANIFEST_FORMAT:
        raise FormatError(f"{manifest_path} is not a {MANIFEST_FORMAT} manifest")
    return ModelSpec.from_dict(manifest["spec"])


def convert_model(model: Model, dtype: str) -> Model:
    """Dtype conversion for packing; only f32 -> q4b32 is meaningful."""
    if dtype == model.spec.dtype:
        return model
    if not (model.spec.dtype == "f32" and dtype == "q4b32"):
        raise InputError(f"cannot convert {model.spec.dtype} model to {dtype}")
    spec = ModelSpec(
        n_layers=model.spec.n_layers,
        hidden_dim=model.spec.hidden_dim,
        ffn_dim=model.spec.ffn_dim,
        n_heads=model.spec.n_heads,
        vocab_size=model.spec.vocab_size,
        dtype="q4b32",
        seed=model.spec.seed,
    )
    tensors = {}
    for (layer, op), t in model.tensors.items():
        codes, scales = quantize_q4(t.data)
        tensors[(layer, op)] = WeightTensor(
            layer, op, t.rows, t.cols, "q4b32", dequantize_q4(codes, scales), codes, scales
        )
    return Model(spec, model.embedding, tensors, weight_scale=model.weight_scale)


def load_model(manifest_path) -> Model:
    manifest_path = Path(manifest_path)
    try:
        with open(manifest_path) as fh:
            manifest = json.load(fh)
    except (OSError, json.JSONDecodeError) as e:
        raise FormatError(f"cannot read manifest {manifest_path}: {e}") from e
    if manifest.get("format") != MANIFEST_FORMAT:
        raise FormatError(f"{manifest_path} is not a {MANIFEST_FORMAT} manifest")
    spec = ModelSpec.from_dict(manifest["spec"])
    payload_path = manifest_path.parent / manifest["payload"]
    raw = payload_path.read_bytes()
    embedding = None
    tensors: dict[tuple[int, OpType], WeightTensor] = {}
    for entry in manifest["tensors"]:
        blob = raw[entry["offset"] : entry["offset"] + entry["nbytes"]]
        if len(blob) != entry["nbytes"]:
            raise FormatError(f"payload truncated at tensor {entry['name']}")
        if entry["name"] == "embedding":
            embedding = (
                np.frombuffer(blob, dtype="<f4")
                .reshape(entry["rows"], entry["cols"])
                .astype(np.float32)
            )
        else:
            op = OpType(entry["op"])
            tensors[(entry["layer"], op)] = WeightTensor.from_payload(
                entry["layer"], op, entry["rows"], entry["cols"], spec.dtype, blob
            )
    if embedding is None:
        raise FormatError("manifest has no embedding tensor")
    meta = manifest.get("meta", {})
    return Model(spec, embedding, tensors, weight_scale=meta.get("weight_scale"))

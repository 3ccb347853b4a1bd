"""Top-K contextual sparsity: importance scores, masks, calibrated
thresholds, upper-bound search, and cross-layer similarity statistics.

All tie-breaking is toward the lower channel index, which keeps every
result deterministic across runs and implementations.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .errors import InputError
from .model import (
    OP_ORDER,
    OP_SITE,
    ActivationTrace,
    Decoder,
    Model,
    OpType,
    Site,
    WeightTensor,
    dense_apply,
)


@dataclass(frozen=True)
class ActiveSet:
    """Sorted set of active input-channel indices for one operator."""

    indices: tuple[int, ...]
    op_id: tuple[int, OpType] | None = None

    def __post_init__(self):
        idx = tuple(int(i) for i in self.indices)
        if any(b <= a for a, b in zip(idx, idx[1:])):
            raise InputError("ActiveSet indices must be strictly increasing")
        object.__setattr__(self, "indices", idx)

    @property
    def k(self) -> int:
        return len(self.indices)

    def as_set(self) -> frozenset:
        return frozenset(self.indices)

    def __iter__(self):
        return iter(self.indices)

    def __len__(self):
        return len(self.indices)


def importance_scores(tensor: WeightTensor, x: np.ndarray) -> np.ndarray:
    """S[i][j] = |W[i][j]| * |x[j]|."""
    x = np.asarray(x, dtype=np.float32)
    if x.ndim != 1 or x.shape[0] != tensor.cols:
        raise InputError(f"activation length {x.shape} does not match cols {tensor.cols}")
    if not np.all(np.isfinite(x)):
        raise InputError("non-finite activation")
    return np.abs(tensor.data) * np.abs(x)[None, :]


def topk_mask(x: np.ndarray, *, tau: float | None = None, k: int | None = None) -> ActiveSet:
    """Active indices by threshold (|x| > tau) or by exact count (the k
    largest magnitudes, ties broken toward the lower index)."""
    x = np.asarray(x, dtype=np.float32)
    if not np.all(np.isfinite(x)):
        raise InputError("non-finite activation")
    if (tau is None) == (k is None):
        raise InputError("pass exactly one of tau or k")
    mag = np.abs(x)
    if tau is not None:
        if tau < 0:
            raise InputError("tau must be non-negative")
        idx = np.flatnonzero(mag > tau)
        return ActiveSet(tuple(int(i) for i in idx))
    if not (1 <= k <= x.shape[0]):
        raise InputError(f"k={k} out of range for dimension {x.shape[0]}")
    # stable sort on -|x|: equal magnitudes keep ascending index order
    order = np.argsort(-mag, kind="stable")[:k]
    return ActiveSet(tuple(int(i) for i in np.sort(order)))


def exact_k(dim: int, sparsity: float) -> int:
    """Channel count kept at a sparsity level; at least one channel."""
    if not (0.0 <= sparsity < 1.0):
        raise InputError(f"sparsity {sparsity} outside [0, 1)")
    return max(1, int(round((1.0 - sparsity) * dim)))


def topk_precision(reference: ActiveSet, predicted: ActiveSet) -> float:
    """|reference ∩ predicted| / |reference|; 1.0 when reference is empty."""
    if len(reference) == 0:
        return 1.0
    inter = reference.as_set() & predicted.as_set()
    return len(inter) / len(reference)


@dataclass
class ThresholdTable:
    """Per-(op type, sparsity level) magnitude thresholds, calibrated once
    and read-only afterwards."""

    taus: dict[tuple[OpType, float], float]
    dataset_id: str = ""
    sample_count: int = 0

    def tau(self, op: OpType, level: float) -> float:
        key = (op, level)
        if key not in self.taus:
            raise InputError(f"no threshold calibrated for {op.value} at sparsity {level}")
        return self.taus[key]

    def levels(self) -> list[float]:
        return sorted({lvl for (_, lvl) in self.taus})

    def to_json(self, path) -> None:
        entries = [
            {"op_type": op.value, "sparsity": lvl, "tau": t}
            for (op, lvl), t in sorted(self.taus.items(), key=lambda kv: (kv[0][1], kv[0][0].value))
        ]
        doc = {
            "entries": entries,
            "calibration": {"dataset_id": self.dataset_id, "sample_count": self.sample_count},
        }
        with open(path, "w") as fh:
            json.dump(doc, fh, indent=2, sort_keys=True)
            fh.write("\n")

    @staticmethod
    def from_json(path) -> "ThresholdTable":
        with open(path) as fh:
            doc = json.load(fh)
        taus = {
            (OpType(e["op_type"]), float(e["sparsity"])): float(e["tau"])
            for e in doc["entries"]
        }
        cal = doc.get("calibration", {})
        return ThresholdTable(taus, cal.get("dataset_id", ""), int(cal.get("sample_count", 0)))


def calibrate_thresholds(
    model: Model,
    calib_prompts: Sequence[Sequence[int]],
    sparsity_levels: Sequence[float],
    dataset_id: str = "",
) -> ThresholdTable:
    """Empirical per-op-type thresholds.

    tau(op, sp) is the sp-quantile of |activation| at the op's input site,
    pooled over layers and calibration steps, so one table serves
    cross-layer prediction. Masking with tau realizes a sparsity within
    about 1/n of sp on the calibration set itself.
    """
    if len(calib_prompts) == 0:
        raise InputError("calibration prompt set is empty")
    for lvl in sparsity_levels:
        if not (0.0 <= lvl < 1.0):
            raise InputError(f"sparsity level {lvl} outside [0, 1)")
    from .model import forward_dense

    pools: dict[Site, list[np.ndarray]] = {site: [] for site in Site}
    for prompt in calib_prompts:
        _, trace = forward_dense(model, prompt)
        for step_sites in trace.steps:
            for (layer, site), vec in step_sites.items():
                pools[site].append(np.abs(vec))
    taus: dict[tuple[OpType, float], float] = {}
    count = 0
    site_tau: dict[tuple[Site, float], float] = {}
    for site in Site:
        pooled = np.concatenate(pools[site])
        count += pooled.size
        for lvl in sparsity_levels:
            site_tau[(site, lvl)] = 0.0 if lvl == 0.0 else float(np.quantile(pooled, lvl))
    for op in OP_ORDER:
        for lvl in sparsity_levels:
            taus[(op, float(lvl))] = site_tau[(OP_SITE[op], lvl)]
    return ThresholdTable(taus, dataset_id=dataset_id, sample_count=count)


@dataclass
class SimilarityReport:
    """Cosine similarity and top-k precision for consecutive layer pairs.

    Keys are (lower layer index, site); values are averaged over trace
    steps. ``degenerate`` flags pairs where a zero vector forced the
    cosine to 0.
    """

    cosine: dict[tuple[int, Site], float] = field(default_factory=dict)
    precision: dict[tuple[int, Site], float] = field(default_factory=dict)
    degenerate: set[tuple[int, Site]] = field(default_factory=set)

    def mean_precision(self, site: Site | None = None) -> float:
        vals = [v for (l, s), v in self.precision.items() if site is None or s is site]
        return float(np.mean(vals)) if vals else 0.0

    def write_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("layer,site,cosine,precision,degenerate\n")
            for key in sorted(self.cosine, key=lambda k: (k[0], k[1].value)):
                layer, site = key
                flag = 1 if key in self.degenerate else 0
                fh.write(
                    f"{layer},{site.value},{self.cosine[key]!r},{self.precision[key]!r},{flag}\n"
                )


def _cosine(a: np.ndarray, b: np.ndarray) -> tuple[float, bool]:
    na, nb = float(np.linalg.norm(a)), float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        return 0.0, True
    return float(np.dot(a.astype(np.float64), b.astype(np.float64)) / (na * nb)), False


def cross_layer_similarity(trace: ActivationTrace, sparsity: float = 0.5) -> SimilarityReport:
    """Consecutive-layer similarity of the recorded site activations.

    Precision compares the k-largest-magnitude index sets of the two
    layers, k taken from the configured sparsity at each site's dimension.
    """
    if trace.n_steps == 0:
        raise InputError("empty trace")
    layers = sorted({l for (l, _) in trace.steps[0]})
    if len(layers) < 2:
        raise InputError("trace must cover at least two layers")
    report = SimilarityReport()
    acc_cos: dict[tuple[int, Site], list[float]] = {}
    acc_pre: dict[tuple[int, Site], list[float]] = {}
    for step_sites in trace.steps:
        for site in Site:
            dim = step_sites[(layers[0], site)].shape[0]
            k = exact_k(dim, sparsity)
            for lo, hi in zip(layers, layers[1:]):
                a = step_sites[(lo, site)]
                b = step_sites[(hi, site)]
                cos, degen = _cosine(a, b)
                if degen:
                    report.degenerate.add((lo, site))
                pre = topk_precision(topk_mask(b, k=k), topk_mask(a, k=k))
                acc_cos.setdefault((lo, site), []).append(cos)
                acc_pre.setdefault((lo, site), []).append(pre)
    for key in acc_cos:
        report.cosine[key] = float(np.mean(acc_cos[key]))
        report.precision[key] = float(np.mean(acc_pre[key]))
    return report


def masks_from_trace(trace: ActivationTrace, spec, sparsity: float) -> list[dict]:
    """Exact-k masks for every (layer, op) of every step of a trace."""
    out: list[dict] = []
    for sites in trace.steps:
        step_masks: dict[tuple[int, OpType], ActiveSet] = {}
        for layer in sorted({l for (l, _) in sites}):
            for op in OP_ORDER:
                vec = sites[(layer, OP_SITE[op])]
                step_masks[(layer, op)] = topk_mask(vec, k=exact_k(vec.shape[0], sparsity))
        out.append(step_masks)
    return out


# ---------------------------------------------------------------------------
# Upper-bound contextual sparsity
# ---------------------------------------------------------------------------


def _element_masked_tensors(
    model: Model, sites: Mapping[tuple[int, Site], np.ndarray], retain: float
) -> dict[tuple[int, OpType], np.ndarray]:
    """Per operator, zero the lowest-importance (1 - retain) fraction of
    weight elements, importance taken from this step's dense activations."""
    masked: dict[tuple[int, OpType], np.ndarray] = {}
    for layer in range(model.spec.n_layers):
        for op in OP_ORDER:
            t = model.tensor(layer, op)
            x = sites[(layer, OP_SITE[op])]
            scores = np.abs(t.data) * np.abs(x)[None, :]
            n = scores.size
            n_keep = int(np.ceil(retain * n))
            if n_keep >= n:
                masked[(layer, op)] = t.data
                continue
            flat = scores.ravel()
            # stable ascending sort: equal scores drop the higher flat index
            order = np.argsort(flat, kind="stable")
            drop = order[: n - n_keep]
            keep_mask = np.ones(n, dtype=bool)
            keep_mask[drop] = False
            masked[(layer, op)] = (t.data * keep_mask.reshape(scores.shape)).astype(np.float32)
    return masked


def _override_apply(model: Model, weights: Mapping[tuple[int, OpType], np.ndarray]):
    def apply(layer: int, op: OpType, x: np.ndarray, site: np.ndarray) -> np.ndarray:
        return weights[(layer, op)] @ x

    return apply


def upper_bound_sparsity(
    model: Model,
    prompt: Sequence[int],
    step: float,
    n_tokens: int = 8,
) -> list[float]:
    """Per decoded token, the smallest retained-weight fraction (searched in
    ``step`` increments, removing lowest-importance weight elements per
    operator) that still reproduces the dense model's argmax token.
    """
    if not (0.0 < step <= 1.0):
        raise InputError("step must be in (0, 1]")
    if len(prompt) == 0:
        raise InputError("prompt must be non-empty")
    levels = [round(step * i, 10) for i in range(1, int(round(1.0 / step)) + 1)]
    if levels[-1] < 1.0:
        levels.append(1.0)

    dec = Decoder(model)
    apply = dense_apply(model)
    sequence = list(prompt)
    fractions: list[float] = []
    next_tok = None
    for i in range(len(sequence) + n_tokens):
        tok = sequence[i] if i < len(sequence) else next_tok
        snapshot = dec.clone()
        logits, sites = dec.step(int(tok), apply)
        next_tok = int(np.argmax(logits))
        if i < len(sequence) - 1:
            continue
        found = None
        for retain in levels:
            masked = _element_masked_tensors(model, sites, retain)
            trial = snapshot.clone()
            trial_logits, _ = trial.step(int(tok), _override_apply(model, masked))
            if int(np.argmax(trial_logits)) == next_tok:
                found = retain
                break
        fractions.append(found if found is not None else 1.0)
        if len(fractions) == n_tokens:
            break
    return fractions

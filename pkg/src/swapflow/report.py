"""Aggregation of run-trace CSVs into summary and plot-ready tables."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

from .errors import FormatError, InputError

# Columns the pipeline writes; the first eleven form the stable contract,
# the trailing three carry per-token totals repeated on each group row.
TRACE_COLUMNS = [
    "token",
    "group",
    "t_preload_us",
    "t_onload_us",
    "t_topk_us",
    "t_comp_us",
    "bytes_preload",
    "bytes_onload",
    "n_hit",
    "n_miss",
    "preload_precision",
    "wall_us",
    "bubble_us",
    "peak_dram",
]


@dataclass
class TraceSummary:
    name: str
    n_tokens: int
    total_time_s: float
    tokens_per_s: float
    hit_rate: float
    bytes_preload: int
    bytes_onload: int
    overlap_efficiency: float
    peak_dram: int


def read_trace_csv(path) -> list[dict]:
    try:
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames is None:
                raise FormatError(f"{path}: empty trace file")
            missing = [c for c in TRACE_COLUMNS[:11] if c not in reader.fieldnames]
            if missing:
                raise FormatError(f"{path}: trace is missing columns {missing}")
            rows = [row for row in reader]
    except OSError as e:
        raise FormatError(f"cannot read trace {path}: {e}") from e
    return rows


def summarize_trace(path) -> TraceSummary:
    rows = read_trace_csv(path)
    if not rows:
        raise InputError(f"{path}: no data")
    tokens: dict[int, dict] = {}
    hits = misses = b_pre = b_ond = 0
    for row in rows:
        tok = int(row["token"])
        hits += int(row["n_hit"])
        misses += int(row["n_miss"])
        b_pre += int(row["bytes_preload"])
        b_ond += int(row["bytes_onload"])
        if tok not in tokens:
            tokens[tok] = row
    total_us = sum(float(r.get("wall_us", 0.0)) for r in tokens.values())
    bubble_us = sum(float(r.get("bubble_us", 0.0)) for r in tokens.values())
    peak = max(int(float(r.get("peak_dram", 0))) for r in tokens.values())
    total_s = total_us / 1e6
    return TraceSummary(
        name=Path(path).name,
        n_tokens=len(tokens),
        total_time_s=total_s,
        tokens_per_s=len(tokens) / total_s if total_s > 0 else 0.0,
        hit_rate=hits / (hits + misses) if hits + misses else 0.0,
        bytes_preload=b_pre,
        bytes_onload=b_ond,
        overlap_efficiency=1.0 - bubble_us / total_us if total_us > 0 else 1.0,
        peak_dram=peak,
    )


def write_summary_csv(summaries: list[TraceSummary], path) -> None:
    with open(path, "w") as fh:
        fh.write(
            "trace,n_tokens,total_time_s,tokens_per_s,hit_rate,"
            "bytes_preload,bytes_onload,overlap_efficiency,peak_dram\n"
        )
        for s in summaries:
            fh.write(
                f"{s.name},{s.n_tokens},{s.total_time_s!r},{s.tokens_per_s!r},{s.hit_rate!r},"
                f"{s.bytes_preload},{s.bytes_onload},{s.overlap_efficiency!r},{s.peak_dram}\n"
            )


def write_long_csv(trace_paths: list, path) -> None:
    """Plot-ready long format: one (trace, token, metric, value) per row."""
    metrics = [
        "wall_us",
        "bubble_us",
        "t_preload_us",
        "t_onload_us",
        "t_topk_us",
        "t_comp_us",
        "bytes_preload",
        "bytes_onload",
        "n_hit",
        "n_miss",
    ]
    with open(path, "w") as fh:
        fh.write("trace,token,metric,value\n")
        for tp in trace_paths:
            rows = read_trace_csv(tp)
            name = Path(tp).name
            per_token: dict[int, dict[str, float]] = {}
            for row in rows:
                tok = int(row["token"])
                acc = per_token.setdefault(tok, {m: 0.0 for m in metrics})
                for m in ("t_preload_us", "t_onload_us", "t_topk_us", "t_comp_us"):
                    acc[m] += float(row[m])
                for m in ("bytes_preload", "bytes_onload", "n_hit", "n_miss"):
                    acc[m] += int(row[m])
                acc["wall_us"] = float(row.get("wall_us", 0.0))
                acc["bubble_us"] = float(row.get("bubble_us", 0.0))
            for tok in sorted(per_token):
                for m in metrics:
                    fh.write(f"{name},{tok},{m},{per_token[tok][m]!r}\n")

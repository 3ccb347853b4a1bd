"""Command-line entry point: reproducible end-to-end experiments.

Subcommands: genmodel, analyze, calibrate, pack, plan, run, report.
Every subcommand echoes its resolved configuration to
``<primary output>.config.json`` so results are reproducible from the
artifacts alone. Anything stochastic takes an explicit seed; no
wall-clock entropy anywhere.

Exit codes: 0 success, 2 usage error, 3 input/format error, 4 planning
infeasible, 5 runtime fault.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from . import cache as cache_mod
from . import pipeline as pipe
from . import planner as planner_mod
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
    ModelSpec,
    convert_model,
    forward_dense,
    gen_model,
    load_model,
    load_spec,
    save_model,
)
from .report import summarize_trace, write_long_csv, write_summary_csv
from .sparsity import (
    ThresholdTable,
    calibrate_thresholds,
    cross_layer_similarity,
    masks_from_trace,
    upper_bound_sparsity,
)
from .store import BandwidthModel, default_profile, open_store, pack as pack_store

PROFILE_ENV = "SWAPFLOW_PROFILE"

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_INPUT = 3
EXIT_PLANNING = 4
EXIT_RUNTIME = 5


def _read_tokens(path) -> list[int]:
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise InputError(f"cannot read token file {path}: {e}") from e
    toks = [t for chunk in text.replace(",", " ").split() for t in [chunk.strip()] if t]
    if not toks:
        raise InputError(f"token file {path} is empty")
    try:
        return [int(t) for t in toks]
    except ValueError as e:
        raise FormatError(f"token file {path} holds non-integer tokens: {e}") from e


def _resolve_profile(path) -> BandwidthModel:
    if path is None:
        path = os.environ.get(PROFILE_ENV)
    if path is None:
        return default_profile()
    return BandwidthModel.from_json(path)


def _echo_config(out_path, subcommand: str, args: argparse.Namespace, extra: dict | None = None) -> None:
    doc = {
        "subcommand": subcommand,
        "flags": {k: v for k, v in sorted(vars(args).items()) if k != "func"},
    }
    if extra:
        doc.update(extra)
    echo = Path(str(out_path) + ".config.json")
    with open(echo, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True, default=str)
        fh.write("\n")


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_genmodel(args) -> None:
    spec = ModelSpec(
        n_layers=args.layers,
        hidden_dim=args.hidden,
        ffn_dim=args.ffn,
        n_heads=args.heads,
        vocab_size=args.vocab,
        dtype=args.dtype,
        seed=args.seed,
    )
    model = gen_model(spec, args.weight_scale)
    save_model(model, args.out)
    _echo_config(args.out, "genmodel", args)
    print(f"wrote {args.out} ({spec.n_layers} layers x {len(list(spec.to_dict()['op_types']))} ops, dtype {spec.dtype})")


def cmd_analyze(args) -> None:
    model = load_model(args.model)
    prompt = _read_tokens(args.prompt_tokens)
    _, trace = forward_dense(model, prompt)
    report = cross_layer_similarity(trace, sparsity=args.sparsity)
    report.write_csv(args.similarity_out)
    fractions = upper_bound_sparsity(model, prompt, args.step, n_tokens=args.n_tokens)
    with open(args.upper_bound_out, "w") as fh:
        fh.write("token,fraction\n")
        for i, f in enumerate(fractions):
            fh.write(f"{i},{f!r}\n")
    if args.activation_trace_out:
        trace.write_multi_csv(args.activation_trace_out)
    _echo_config(args.similarity_out, "analyze", args)
    print(f"wrote {args.similarity_out} and {args.upper_bound_out}")


def cmd_calibrate(args) -> None:
    model = load_model(args.model)
    prompts = [_read_tokens(p) for p in args.prompt_tokens]
    levels = [float(x) for x in args.levels.split(",") if x]
    table = calibrate_thresholds(model, prompts, levels, dataset_id=args.dataset_id)
    table.to_json(args.out)
    _echo_config(args.out, "calibrate", args)
    print(f"wrote {args.out} ({len(levels)} levels, {table.sample_count} samples)")


def cmd_pack(args) -> None:
    model = load_model(args.model)
    if args.dtype:
        model = convert_model(model, args.dtype)
    pack_store(model, args.group_size, args.out)
    _echo_config(args.out, "pack", args)
    size = Path(args.out).stat().st_size
    print(f"wrote {args.out} ({size} bytes, group size {args.group_size})")


def cmd_plan(args) -> None:
    spec = load_spec(args.model)
    profile = _resolve_profile(args.profile)
    first = planner_mod.plan(
        spec, profile, args.memory_budget, m_kv=args.kv, stop_threshold=args.stop_threshold
    )
    result = first
    if args.calib_trace:
        from .model import ActivationTrace

        atrace = ActivationTrace.read_multi_csv(args.calib_trace)
        si = planner_mod.estimate_si(atrace, first.sparsity)
        mask_trace = masks_from_trace(atrace, spec, first.sparsity)
        hr = planner_mod.estimate_hr(mask_trace, spec, first.m_cache)
        result = planner_mod.plan(
            spec,
            profile,
            args.memory_budget,
            m_kv=args.kv,
            hr=hr,
            si=si,
            stop_threshold=args.stop_threshold,
        )
    result.to_json(args.out)
    _echo_config(args.out, "plan", args)
    print(
        f"plan: sparsity={result.sparsity:.4f} group_size={result.group_size} "
        f"m_cache={result.m_cache} predicted_decode={result.predicted.t_decode * 1e3:.3f} ms"
    )


def cmd_run(args) -> None:
    store = open_store(args.store, mode=args.mode)
    plan_obj = planner_mod.Plan.from_json(args.plan)
    profile = _resolve_profile(args.profile)
    prompt = _read_tokens(args.prompt_tokens)
    selector = None
    if args.thresholds:
        table = ThresholdTable.from_json(args.thresholds)
        selector = pipe.MaskSelector.from_thresholds(store.spec, table, plan_obj.sparsity)
    cache_state = cache_mod.make_cache(store.spec, budget_bytes=plan_obj.m_cache)
    tokens, trace = pipe.decode(
        None,
        store,
        cache_state,
        plan_obj,
        prompt,
        args.n_tokens,
        profile=profile,
        selector=selector,
    )
    store.close()
    trace.write_csv(args.trace)
    _echo_config(args.trace, "run", args, extra={"emitted_tokens": tokens})
    rep = pipe.timing_report(trace)
    print(
        f"decoded {len(tokens)} tokens in {rep.total_time_s * 1e3:.3f} ms (simulated clock: {args.mode == 'sim'}), "
        f"hit rate {rep.hit_rate:.3f}, overlap efficiency {rep.overlap_efficiency:.3f}"
    )
    print("tokens:", " ".join(str(t) for t in tokens))


def cmd_report(args) -> None:
    summaries = [summarize_trace(p) for p in args.trace]
    write_summary_csv(summaries, args.summary_out)
    if args.long_out:
        write_long_csv(args.trace, args.long_out)
    _echo_config(args.summary_out, "report", args)
    for s in summaries:
        print(
            f"{s.name}: {s.n_tokens} tokens, {s.tokens_per_s:.3f} tok/s, "
            f"hit rate {s.hit_rate:.3f}, {s.bytes_preload + s.bytes_onload} bytes moved"
        )


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="swapflow", description=__doc__)
    sub = p.add_subparsers(dest="subcommand", required=True)

    g = sub.add_parser("genmodel", help="generate a deterministic synthetic model")
    g.add_argument("--layers", type=int, required=True)
    g.add_argument("--hidden", type=int, required=True)
    g.add_argument("--ffn", type=int, required=True)
    g.add_argument("--heads", type=int, default=4)
    g.add_argument("--vocab", type=int, default=256)
    g.add_argument("--dtype", choices=["f32", "q4b32"], default="f32")
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--weight-scale", type=float, default=0.1)
    g.add_argument("--out", required=True, help="manifest path; payload lands beside it")
    g.set_defaults(func=cmd_genmodel)

    a = sub.add_parser("analyze", help="cross-layer similarity and upper-bound sparsity")
    a.add_argument("--model", required=True)
    a.add_argument("--prompt-tokens", required=True)
    a.add_argument("--sparsity", type=float, default=0.5, help="level for top-k precision")
    a.add_argument("--step", type=float, default=0.05, help="upper-bound search increment")
    a.add_argument("--n-tokens", type=int, default=8, help="decoded tokens for the upper bound")
    a.add_argument("--similarity-out", required=True)
    a.add_argument("--upper-bound-out", required=True)
    a.add_argument("--activation-trace-out", default=None)
    a.set_defaults(func=cmd_analyze)

    c = sub.add_parser("calibrate", help="empirical per-op activation thresholds")
    c.add_argument("--model", required=True)
    c.add_argument("--prompt-tokens", nargs="+", required=True)
    c.add_argument("--levels", default="0.5,0.7,0.9", help="comma-separated sparsity levels")
    c.add_argument("--dataset-id", default="cli")
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_calibrate)

    k = sub.add_parser("pack", help="write the reordered flash store")
    k.add_argument("--model", required=True)
    k.add_argument("--group-size", type=int, required=True)
    k.add_argument("--dtype", choices=["f32", "q4b32"], default=None, help="convert while packing")
    k.add_argument("--out", required=True)
    k.set_defaults(func=cmd_pack)

    pl = sub.add_parser("plan", help="cost-model parameter search under a memory budget")
    pl.add_argument("--model", required=True)
    pl.add_argument("--profile", default=None, help=f"device profile JSON (default ${PROFILE_ENV})")
    pl.add_argument("--memory-budget", type=int, required=True)
    pl.add_argument("--kv", type=int, default=0)
    pl.add_argument("--calib-trace", default=None, help="activation trace CSV for hr/si estimation")
    pl.add_argument("--stop-threshold", type=float, default=planner_mod.DEFAULT_STOP_THRESHOLD)
    pl.add_argument("--out", required=True)
    pl.set_defaults(func=cmd_plan)

    r = sub.add_parser("run", help="decode through the swapping pipeline")
    r.add_argument("--store", required=True)
    r.add_argument("--profile", default=None)
    r.add_argument("--plan", required=True)
    r.add_argument("--prompt-tokens", required=True)
    r.add_argument("--n-tokens", type=int, required=True)
    r.add_argument("--mode", choices=["real", "sim"], default="sim")
    r.add_argument("--seed", type=int, required=True, help="recorded for reproducibility")
    r.add_argument("--thresholds", default=None, help="threshold table JSON; exact-k if omitted")
    r.add_argument("--trace", required=True, help="run trace CSV output")
    r.set_defaults(func=cmd_run)

    rp = sub.add_parser("report", help="aggregate run traces into summary tables")
    rp.add_argument("--trace", nargs="+", required=True)
    rp.add_argument("--summary-out", required=True)
    rp.add_argument("--long-out", default=None)
    rp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args.func(args)
    except (InputError, FormatError, SpecError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT
    except PlanningError as e:
        print(f"planning error: {e} {e.diagnostics}", file=sys.stderr)
        return EXIT_PLANNING
    except (BudgetFault, StoreError, SwapflowError) as e:
        print(f"runtime fault: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

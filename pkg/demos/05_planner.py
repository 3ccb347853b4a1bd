#!/usr/bin/env python3
"""The cost model and the greedy parameter search.

Sparsity follows straight from the budget ratio (that fixes model quality),
then the group size grows until preloading hides under compute, and the
leftover budget becomes weight cache.
"""

from swapflow import ModelSpec
from swapflow.planner import CostParams, memory_cost, plan, predict_decode_time
from swapflow.store import BandwidthModel

GB = 1_000_000_000
MB = 1_000_000

print("== closed-form decode time, hand-checkable fixture ==")
p = CostParams(sp=0.5, hr=0.6, si=0.9, bw_mem=8 * GB, bw_small_flash=0.5 * GB,
               bw_large_flash=4 * GB, s_m=400 * MB, s_l=100 * MB, n_group=2,
               m_max=1e15, m_cache=0.0, m_kv=0.0)
tb = predict_decode_time(p)
print(f"m_cl {tb.m_cl / MB:.0f} MB, groups {tb.n_groups}")
print(f"t_load {tb.t_load * 1e3:.1f} ms, t_comp {tb.t_comp * 1e3:.1f} ms, "
      f"t_onload {tb.t_onload * 1e3:.1f} ms, t_preload {tb.t_preload * 1e3:.1f} ms")
print(f"t_overlap {tb.t_overlap * 1e3:.1f} ms -> t_decode {tb.t_decode * 1e3:.1f} ms, "
      f"memory {memory_cost(p) / MB:.0f} MB")
print()

print("== greedy search over group size ==")
spec = ModelSpec(n_layers=8, hidden_dim=64, ffn_dim=128, n_heads=4, vocab_size=64, seed=0)
profile = BandwidthModel(
    table=[(64, 200e6), (640, 900e6), (1280, 3.6e9), (2560, 5.8e9)],
    bw_mem=8e9, req_latency_s=80e-6,
)
s_m = spec.model_bytes()
print(f"model {s_m} bytes, {spec.n_layers} layers")
print("budget    sparsity  N   m_cache   predicted decode")
for frac in (0.9, 0.7, 0.5, 0.35):
    m_max = int(s_m * frac)
    result = plan(spec, profile, m_max=m_max, m_kv=2048)
    print(f"  {frac:4.0%}    {result.sparsity:6.3f}  {result.group_size}  "
          f"{result.m_cache:8d}  {result.predicted.t_decode * 1e6:9.1f} us")
print()
print("smaller budgets force higher sparsity; the group size settles where")
print("large-chunk bandwidth catches up with memory bandwidth")

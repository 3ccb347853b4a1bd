#!/usr/bin/env python3
"""Full decode through the swapping pipeline, with the books opened.

Packs a toy model into the reordered store, plans under a 50% memory
budget, decodes a dozen tokens, and verifies the emitted stream against
the offline masked forward on the masks the pipeline actually used.
"""

import tempfile
from pathlib import Path

import numpy as np

from swapflow import ModelSpec, gen_model, pack, open_store, forward_sparse
from swapflow import cache as cache_mod
from swapflow.pipeline import decode, timing_report
from swapflow.planner import plan
from swapflow.store import BandwidthModel

spec = ModelSpec(n_layers=8, hidden_dim=32, ffn_dim=64, n_heads=4, vocab_size=64, seed=123)
model = gen_model(spec, 1.0)
profile = BandwidthModel(table=[(64, 2e8), (320, 4e9)], bw_mem=8e9, req_latency_s=1e-6)

tmp = Path(tempfile.mkdtemp())
store_path = tmp / "model.awsp"

budget = spec.model_bytes() // 2
result = plan(spec, profile, m_max=budget, m_kv=2048)
print(f"budget {budget} B on a {spec.model_bytes()} B model")
print(f"plan: sparsity {result.sparsity:.3f}, group size {result.group_size}, "
      f"cache {result.m_cache} B, predicted decode {result.predicted.t_decode * 1e6:.1f} us/token")

pack(model, result.group_size, store_path)
prompt = [1, 2, 3]
with open_store(store_path) as store:
    cache_state = cache_mod.make_cache(spec, budget_bytes=result.m_cache)
    tokens, trace = decode(model, store, cache_state, result, prompt, 12, profile=profile)

print(f"decoded: {tokens}")

seq = prompt + tokens
logits = forward_sparse(model, seq, trace.step_masks)
oracle = [int(np.argmax(logits[len(prompt) - 1 + i])) for i in range(len(tokens))]
print(f"offline masked-forward oracle agrees: {oracle == tokens}")
print()

rep = timing_report(trace)
print(f"simulated decode: {rep.tokens_per_s:,.0f} tokens/s, hit rate {rep.hit_rate:.2%}, "
      f"overlap efficiency {rep.overlap_efficiency:.2%}")
print(f"bytes moved: preload {rep.bytes_preload:,}, on-demand {rep.bytes_onload:,}; "
      f"peak DRAM {rep.peak_dram:,} of {result.m_max:,} budget")
print()
print("per-token picture (us): wall = waits + topk + on-demand + compute")
print("token   wall    load(g0)  onload(rest)  preload(hidden)  bubble   hit/miss")
for row in rep.per_token:
    print(f"  {row['token']:3d}  {row['wall_s'] * 1e6:7.1f}  {row['t_load_s'] * 1e6:8.1f}  "
          f"{row['t_onload_rest_s'] * 1e6:10.1f}  {row['t_preload_s'] * 1e6:13.1f}  "
          f"{row['bubble_s'] * 1e6:7.2f}  {row['n_hit']:4d}/{row['n_miss']}")

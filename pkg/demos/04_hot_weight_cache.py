#!/usr/bin/env python3
"""Contextual hot-weight caching: least-used eviction with counters that
reset per context.

First replays the classic 8-channel / capacity-4 walkthrough, then shows
why counting frequencies inside the current context beats a static top-k
built from whole-dataset statistics when contexts have different hot sets.
"""

from swapflow import ModelSpec
from swapflow.cache import access, admit, build_task_cache, hit_rate, make_cache, reset_context
from swapflow.model import OP_ORDER, OpType

spec = ModelSpec(n_layers=1, hidden_dim=8, ffn_dim=8, n_heads=1, vocab_size=8, seed=0)
op = (0, OpType.Q)

print("== worked example: 8 channels, capacity 4, warm set {0,2,3,5} ==")
caps = {(0, o): 0 for o in OP_ORDER}
caps[op] = 4
state = make_cache(spec, capacities=caps)
for ch in (0, 2, 3, 5):
    state.tensors[op].resident[ch] = None
reset_context(state, reset_stats=True)

for step, request in enumerate(([0, 1, 4, 6], [0, 4, 6, 7]), start=1):
    hits, misses = access(state, op, request)
    for ch in misses:
        admit(state, op, ch, None)
    print(f"token {step}: request {request} -> hits {hits}, "
          f"ratio {len(hits) / len(request):.0%}, resident {sorted(state.tensors[op].resident)}")
print(f"cumulative hit rate: {hit_rate(state):.2f}")
print()

print("== context-level vs task-level residency ==")
ctx_a = [{op: [0, 1, 2, 3]} for _ in range(30)]
ctx_b = [{op: [4, 5, 6, 7]} for _ in range(30)]

task = build_task_cache(ctx_a + ctx_b, spec, capacity=4)
print(f"task-level top-4 channels (dataset-wide frequency): {sorted(task.tensors[op].resident)}")

dynamic = make_cache(spec, capacities=caps)

def replay(state, label):
    reset_context(state, reset_stats=True)
    for ctx in (ctx_a, ctx_b):
        reset_context(state)  # new context: counters restart
        for step in ctx:
            for op_id, channels in step.items():
                _, misses = access(state, op_id, channels)
                for ch in misses:
                    admit(state, op_id, ch, None)
    print(f"{label}: hit rate {hit_rate(state):.2%}")

replay(task, "frozen task-level cache ")
replay(dynamic, "dynamic context cache   ")
print("the dynamic cache pays one cold pass per context, then hits everything")

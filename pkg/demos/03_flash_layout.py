#!/usr/bin/env python3
"""Why the on-flash layout interleaves channels across layers.

Flash throughput collapses at small chunk sizes. A per-layer layout reads
one channel slice per layer (small chunks, one request each); the
reordered layout fetches the same channel for a whole layer group in one
contiguous read. hidden=1024 puts a single f32 channel at 4 KiB, right
where the default device profile's bandwidth curve starts climbing.
"""

import numpy as np

from swapflow import ModelSpec, gen_model, pack, open_store, simulate_read_time, default_profile
from swapflow.model import OpType
import tempfile
from pathlib import Path

spec = ModelSpec(n_layers=4, hidden_dim=1024, ffn_dim=32, n_heads=4, vocab_size=4, seed=1)
model = gen_model(spec, 0.0)
bw = default_profile()

print("device profile (chunk -> throughput):")
for chunk, thr in bw.table:
    print(f"  {chunk:>7d} B  {thr / 1e9:5.2f} GB/s")
print(f"per-request latency: {bw.req_latency_s * 1e6:.0f} us")
print()

tmp = Path(tempfile.mkdtemp())
grouped, perlayer = tmp / "g4.awsp", tmp / "g1.awsp"
pack(model, 4, grouped)
pack(model, 1, perlayer)

rng = np.random.default_rng(7)
print("reading f of 1024 Q channels for a 4-layer group:")
print("active%   grouped reqs/time      per-layer reqs/time    speedup")
with open_store(grouped) as sg, open_store(perlayer) as sl:
    for frac in (0.01, 0.05, 0.1, 0.25, 0.5, 1.0):
        k = max(1, int(round(frac * 1024)))
        chans = sorted(rng.choice(1024, size=k, replace=False).tolist())
        _, st_g = sg.read_channels(0, OpType.Q, chans)
        t_g = simulate_read_time(st_g, bw)
        t_l, reqs_l = 0.0, 0
        for layer in range(4):
            _, st = sl.read_layer_channels(layer, OpType.Q, chans)
            t_l += simulate_read_time(st, bw)
            reqs_l += st.n_requests
        print(f"  {frac:5.0%}   {st_g.n_requests:4d} / {t_g * 1e3:7.3f} ms   "
              f"{reqs_l:5d} / {t_l * 1e3:7.3f} ms   {t_l / t_g:5.2f}x")

print()
print("single channel across the group: one contiguous read of "
      f"{4 * spec.channel_bytes(OpType.Q)} bytes (4 x 4096)")

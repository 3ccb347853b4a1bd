#!/usr/bin/env python3
"""How much of the model does one token actually need?

Builds a toy transformer, scores every weight element by |W| * |x|, and
searches for the smallest retained fraction that still reproduces the
dense model's argmax token, token by token.
"""

import numpy as np

from swapflow import ModelSpec, gen_model, importance_scores, upper_bound_sparsity
from swapflow.model import OpType, Site, forward_dense

spec = ModelSpec(n_layers=2, hidden_dim=32, ffn_dim=64, n_heads=4, vocab_size=48, seed=17)
model = gen_model(spec, 1.0)
prompt = [3, 11]

print("== importance scores ==")
_, trace = forward_dense(model, prompt)
x = trace.site(0, 0, Site.ATTN_IN)
scores = importance_scores(model.tensor(0, OpType.Q), x)
print(f"layer 0 Q score matrix: shape {scores.shape}, "
      f"top 1% of elements carry {np.sort(scores, axis=None)[-scores.size // 100:].sum() / scores.sum():.1%} of total mass")

print()
print("== upper-bound contextual sparsity ==")
print("smallest retained-weight fraction per decoded token (step 0.05):")
fractions = upper_bound_sparsity(model, prompt, step=0.05, n_tokens=8)
for i, f in enumerate(fractions):
    bar = "#" * int(f * 40)
    print(f"  token {i}: retain {f:4.2f}  {bar}")
print(f"mean retained fraction: {np.mean(fractions):.3f} "
      f"(active-weight upper bound {1 - np.mean(fractions):.1%} sparsity)")

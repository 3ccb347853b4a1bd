#!/usr/bin/env python3
"""Residual connections make consecutive layers see similar inputs.

With small operator weights the residual stream dominates each block's
output, so block inputs barely rotate between layers; that is what makes
predicting the next layers' active channels from the current activation
work. Compare weight_scale 0.1 against 2.0.
"""

import numpy as np

from swapflow import ModelSpec, gen_model, cross_layer_similarity
from swapflow.model import Site, forward_dense, residual_output_ratio

spec = ModelSpec(n_layers=10, hidden_dim=64, ffn_dim=128, n_heads=4, vocab_size=64, seed=2)
prompt = list(range(12))

for scale in (0.1, 2.0):
    model = gen_model(spec, scale)
    _, trace = forward_dense(model, prompt)
    rep = cross_layer_similarity(trace, sparsity=0.5)
    ratio = residual_output_ratio(model, prompt)
    print(f"== weight_scale {scale} (block output / residual magnitude: {ratio:.3f}) ==")
    print("layer pair   cosine   top-k precision   (ATTN_IN)")
    for lo in range(spec.n_layers - 1):
        key = (lo, Site.ATTN_IN)
        print(f"  {lo:2d}->{lo + 1:<2d}     {rep.cosine[key]:6.3f}   {rep.precision[key]:6.3f}")
    attn = [rep.precision[(lo, Site.ATTN_IN)] for lo in range(2, spec.n_layers - 1)]
    print(f"mean top-k precision beyond layer 2: {np.mean(attn):.3f}")
    print()

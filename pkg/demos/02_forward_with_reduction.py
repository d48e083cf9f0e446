"""
One image, four token budgets
=============================

The encoder runs the same weights under four reduction strategies:

- none:       every layer sees all 197 tokens
- evit:       the least class-attentive tokens are pruned at layers 3/6/9
              (fused into one summary token so nothing vanishes outright)
- tome:       the most similar token pairs merge at every layer, importance
              never consulted
- imagepiece: retokenization — only tokens the class token ignores are
              eligible, the most redundant of those merge each layer, and
              the pruning layers then drop what stayed unimportant

Watch the per-layer token counts and where the merges actually happen.
"""

import numpy as np

from repiece.config import ModelConfig, ReductionConfig
from repiece.synth import smooth_image
from repiece.vit import forward_image, init_random

cfg = ModelConfig(depth=12, heads=2, dim=32, num_classes=10)
weights = init_random(cfg, seed=1)
image = smooth_image(seed=7)

for strategy in ("none", "evit", "tome", "imagepiece"):
    logits, run = forward_image(image, weights, ReductionConfig(strategy=strategy))
    counts = run.token_counts()
    merges = sum(ld.merges_executed for ld in run.per_layer)
    pruned = sum(ld.pruned_size for ld in run.per_layer)
    print(f"\n{strategy}:")
    print(f"  tokens per layer: {counts}")
    print(f"  prediction {int(np.argmax(logits))}, "
          f"{merges} merges, {pruned} patches pruned, {run.flops / 1e9:.2f} GFLOPs")

# Under imagepiece the merged abstractions stay on the books: each carries
# the patch cells it absorbed, and attention is biased by log(size) so a
# token speaking for 5 patches gets 5 patches' worth of attention mass.
logits, run = forward_image(image, weights, ReductionConfig(strategy="imagepiece"))
layer0 = run.per_layer[0]
print(f"\nimagepiece layer 0: {layer0.merges_executed} merges, "
      f"mean pair similarity {layer0.mean_merge_similarity:.3f}")
print(f"bottom-k candidates: {len(layer0.bottom_k_set)} of {layer0.n_scored} image tokens")
print(f"ids of the merged abstractions: {sorted(layer0.merged_token_ids)[:8]} ...")

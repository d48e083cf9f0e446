"""
Measuring what a reduction strategy actually did
================================================

Three questions about any token-reduction run, answered from its diagnostics:

1. Did it merge anything the model cared about? (overlap with the top-q%
   most class-attentive tokens — retokenization is 0 here by construction,
   similarity-only merging is not)
2. How similar were the merged pairs, and does that drift across layers?
3. Do tokens written off as inattentive ever climb back into relevance
   after their neighbourhood was reorganized?
"""

import numpy as np

from repiece.config import ModelConfig, ReductionConfig
from repiece.diag import (
    aggregate_lowest,
    inattn_trail,
    merged_pair_similarity,
    merged_topk_overlap,
)
from repiece.synth import smooth_corpus
from repiece.vit import forward_image, init_random

cfg = ModelConfig(depth=6, heads=2, dim=32, num_classes=10)
weights = init_random(cfg, seed=3)
images = smooth_corpus(12, seed=11)
prune = frozenset({2, 4})

runs = {}
for strategy in ("imagepiece", "tome"):
    rcfg = ReductionConfig(strategy=strategy, prune_layers=prune)
    runs[strategy] = [forward_image(img, weights, rcfg)[1] for img in images]

# 1 — overlap between merged tokens and the top 70% by class attention.
q = 70.0
for strategy, rs in runs.items():
    values = [merged_topk_overlap(r, q) for r in rs]
    print(f"{strategy:10s} top-{q:.0f}% overlap: "
          f"mean {np.mean(values):5.1f}%, max {max(values):5.1f}%")
print("(retokenization merges only below the attentiveness cut, so it stays at 0)\n")

# 2 — merge quality at the first and last merging layer, plus the robust
# aggregate: the mean over the lowest-similarity samples.
for sel in ("first", "last"):
    sims = [merged_pair_similarity(r, sel) for r in runs["imagepiece"]]
    print(f"imagepiece {sel}-layer pair similarity: mean {np.mean([s for s in sims if s is not None]):.3f}")
worst = aggregate_lowest([merged_pair_similarity(r, "first") for r in runs["imagepiece"]], n=5)
print(f"mean of the 5 lowest first-layer similarities: {worst:.3f}\n")

# 3 — of the tokens merged at layer L, what share does layer L+1 rank above
# the bottom-k cut again? A non-zero trail means the merged abstractions
# earned back attention after retokenization.
trail = inattn_trail(runs["imagepiece"][0], p=0.3)
print("inattentive-to-attentive trail (layer, share):")
for layer, ratio in trail:
    print(f"  layer {layer}: {ratio:.2f}")
mean_ratio = np.mean([r for run in runs["imagepiece"] for _, r in inattn_trail(run, 0.3)])
print(f"mean over {len(images)} images: {mean_ratio:.2f}")

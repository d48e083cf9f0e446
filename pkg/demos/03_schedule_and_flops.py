"""
Token schedules and what they cost
==================================

Every reduction strategy implies a deterministic per-layer token count, so
compute cost is a closed-form function of the configuration — no forward
pass needed. This script reproduces the counts analytically, prices them,
and sweeps the knobs that trade accuracy for speed.
"""

from repiece.config import ModelConfig, ReductionConfig
from repiece.diag import flops_count, schedule_rows, token_schedule

cfg = ModelConfig()  # 12 layers, dim 384, 196 patches + CLS

baseline = flops_count(cfg, token_schedule(cfg, ReductionConfig()))
print(f"unreduced: 197 tokens everywhere, {baseline / 1e9:.2f} GFLOPs\n")

for strategy in ("evit", "tome", "imagepiece"):
    rcfg = ReductionConfig(strategy=strategy)
    counts = token_schedule(cfg, rcfg)
    cost = flops_count(cfg, counts)
    print(f"{strategy:10s}: {counts[0]} -> {counts[-1]} tokens, "
          f"{cost / 1e9:.2f} GFLOPs ({cost / baseline:.1%} of baseline)")

# Cumulative cost layer by layer, straight from the schedule.
print("\nimagepiece, cumulative:")
print("layer  tokens  GFLOPs so far")
for layer, tokens, flops_cum in schedule_rows(cfg, ReductionConfig(strategy="imagepiece")):
    print(f"{layer:5d}  {tokens:6d}  {flops_cum / 1e9:13.2f}")

# keep_rate is the blunt knob: how much survives each pruning layer.
print("\nkeep_rate sweep (imagepiece):")
for keep in (0.5, 0.6, 0.7, 0.8, 0.9, 1.0):
    rcfg = ReductionConfig(strategy="imagepiece", keep_rate=keep)
    cost = flops_count(cfg, token_schedule(cfg, rcfg))
    final = token_schedule(cfg, rcfg)[-1]
    print(f"  keep {keep:.1f}: {final:3d} final tokens, {cost / baseline:.1%} of baseline")

# merge_ratio is the gentle one: how many abstractions form per layer.
print("\nmerge_ratio sweep (imagepiece, keep_rate 0.8):")
for merge in (0.02, 0.05, 0.08, 0.12):
    rcfg = ReductionConfig(strategy="imagepiece", merge_ratio=merge)
    cost = flops_count(cfg, token_schedule(cfg, rcfg))
    print(f"  merge {merge:.2f}: {cost / baseline:.1%} of baseline")

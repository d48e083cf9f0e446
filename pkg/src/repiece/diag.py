"""Diagnostics and accounting: token schedules, FLOPs, reduction metrics,
benchmarking and the masking-noise harness.

Everything here is either pure arithmetic (schedules, FLOPs), a pure fold over
a RunDiag produced by the encoder, or a harness that drives forwards and folds
the results. Nothing in this module touches tensors beyond cosine similarity.
"""

from __future__ import annotations

import json
import math
import os
import statistics
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .config import IMAGE_SIZE, ModelConfig, ReductionConfig
from .embed import TokenBatch, apply_random_masks
from .errors import DegenerateInputError, DimensionError, RangeError
from .reduce import bottom_k_count, keep_count, merge_budget

THREADS_ENV = "REPIECE_THREADS"


@dataclass(frozen=True)
class LayerDiag:
    """Per-layer record of what the encoder and its reduction step did.

    token_count is the sequence length (CLS included) after the layer's
    reduction; bottom_k_set and merged_token_ids hold token ids (the minimum
    original patch index carried by each token), which stay meaningful across
    layers even as tokens merge.
    """

    layer: int
    token_count: int
    merges_executed: int
    pruned_size: int
    mean_merge_similarity: float | None
    bottom_k_set: tuple[int, ...]
    merged_token_ids: tuple[int, ...]
    # extra in-memory detail for the metric folds (not serialized):
    n_scored: int = 0
    merged_endpoint_ranks: tuple[int, ...] = ()
    scores_by_id: dict[int, float] = field(default_factory=dict)
    merge_similarities: tuple[float, ...] = ()


@dataclass(frozen=True)
class RunDiag:
    """Diagnostics of one forward pass."""

    per_layer: list[LayerDiag]
    final_output_tokens: int
    flops: int
    strategy: str

    def token_counts(self) -> list[int]:
        return [ld.token_count for ld in self.per_layer]

    def to_dict(self) -> dict:
        return {
            "strategy": self.strategy,
            "final_output_tokens": self.final_output_tokens,
            "flops": self.flops,
            "per_layer": [
                {
                    "layer": ld.layer,
                    "token_count": ld.token_count,
                    "merges_executed": ld.merges_executed,
                    "pruned_size": ld.pruned_size,
                    "mean_merge_similarity": ld.mean_merge_similarity,
                    "bottom_k_set": list(ld.bottom_k_set),
                    "merged_token_ids": list(ld.merged_token_ids),
                }
                for ld in self.per_layer
            ],
        }


def canonical_json(obj) -> str:
    """Stable serialization: sorted keys, no whitespace. Same dict, same bytes."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def max_workers(n_items: int) -> int:
    """Worker cap for fan-out harnesses, bounded by the REPIECE_THREADS env var."""
    cap = os.environ.get(THREADS_ENV)
    limit = int(cap) if cap else (os.cpu_count() or 1)
    return max(1, min(n_items, limit))


# ---------------------------------------------------------------------------
# schedules and FLOPs


def _tome_edges(n_img: int) -> int:
    return (n_img + 1) // 2 if n_img >= 2 else 0


def token_schedule(cfg: ModelConfig, rcfg: ReductionConfig) -> list[int]:
    """Per-layer sequence lengths (CLS included) after each layer's reduction.

    Pure counting that applies the same rounding rules as the live reduction
    steps: even-floored bottom-k, floor merge budgets capped by the edge
    count, ceil keep counts, EViT's optional fused extra token.
    """
    rcfg.validate_depth(cfg.depth)
    n = cfg.num_patches
    counts: list[int] = []
    for layer in range(cfg.depth):
        if rcfg.strategy == "imagepiece":
            if rcfg.retokenize_at(layer):
                n -= merge_budget(n, rcfg.merge_ratio, rcfg.nonsemantic_proportion)
            if rcfg.prune_at(layer):
                n = keep_count(n, rcfg.keep_rate)
        elif rcfg.strategy == "evit":
            if rcfg.prune_at(layer):
                kept = keep_count(n, rcfg.keep_rate)
                fused = 1 if (n - kept) > 0 and rcfg.evit_fuse else 0
                n = kept + fused
        elif rcfg.strategy == "tome":
            n -= min(rcfg.tome_reduction, _tome_edges(n))
        counts.append(n + 1)
    return counts


def _stem_macs(cfg: ModelConfig) -> int:
    if cfg.stem == "grid":
        return cfg.num_patches * cfg.dim * 3 * cfg.patch_size**2
    widths = (3,) + cfg.stem_widths
    side = IMAGE_SIZE
    macs = 0
    for i in range(4):
        side //= 2
        macs += side * side * widths[i + 1] * widths[i] * 9
    macs += side * side * cfg.dim * widths[4]
    return macs


def _layer_macs(cfg: ModelConfig, n_in: int, n_out: int) -> int:
    d = cfg.dim
    attention = 4 * n_in * d * d + 2 * n_in * n_in * d
    mlp = 2 * n_out * d * cfg.mlp_hidden
    return attention + mlp


def flops_count(cfg: ModelConfig, schedule: Sequence[int]) -> int:
    """Analytic FLOPs (multiply-accumulates times two) for a token schedule.

    Attention at layer l runs on the sequence length entering the layer; the
    MLP runs on the post-reduction length schedule[l]. Stem and classifier
    head are counted once.
    """
    macs = _stem_macs(cfg) + cfg.dim * cfg.num_classes
    n_in = cfg.num_patches + 1
    for n_out in schedule:
        macs += _layer_macs(cfg, n_in, n_out)
        n_in = n_out
    return 2 * int(macs)


def schedule_rows(cfg: ModelConfig, rcfg: ReductionConfig) -> list[tuple[int, int, int]]:
    """(layer, tokens, cumulative flops) rows; head FLOPs land on the last row."""
    counts = token_schedule(cfg, rcfg)
    rows = []
    macs = _stem_macs(cfg)
    n_in = cfg.num_patches + 1
    for layer, n_out in enumerate(counts):
        macs += _layer_macs(cfg, n_in, n_out)
        if layer == len(counts) - 1:
            macs += cfg.dim * cfg.num_classes
        rows.append((layer, n_out, 2 * int(macs)))
        n_in = n_out
    return rows


# ---------------------------------------------------------------------------
# reduction metrics


def inattn_to_attn_ratio(
    prev_merged_ids: Iterable[int],
    current_scores: Mapping[int, float],
    p: float,
) -> float:
    """Fraction of previously merged (then-inattentive) tokens that now rank
    above the bottom-k cut. Tokens that no longer exist stay in the
    denominator but cannot count as attentive."""
    prev = set(prev_merged_ids)
    if not prev:
        return 0.0
    ids = np.array(sorted(current_scores), dtype=np.int64)
    scores = np.array([current_scores[int(i)] for i in ids], dtype=np.float64)
    k = bottom_k_count(ids.shape[0], p)
    order = np.lexsort((ids, scores))
    bottom = {int(ids[j]) for j in order[:k]}
    attentive = set(int(i) for i in ids) - bottom
    return len(prev & attentive) / len(prev)


def inattn_trail(run: RunDiag, p: float) -> list[tuple[int, float]]:
    """(layer, ratio) for every layer whose previous layer executed merges."""
    out = []
    for prev, cur in zip(run.per_layer, run.per_layer[1:]):
        if prev.merged_token_ids:
            out.append((cur.layer, inattn_to_attn_ratio(prev.merged_token_ids, cur.scores_by_id, p)))
    return out


def merged_pair_similarity(run: RunDiag, layer_sel: str = "first") -> float | None:
    """Mean similarity of executed merges at the first or last merging layer;
    None when the run never merged."""
    if layer_sel not in ("first", "last"):
        raise RangeError(f"layer_sel must be 'first' or 'last', got {layer_sel!r}")
    merging = [ld for ld in run.per_layer if ld.merges_executed > 0]
    if not merging:
        return None
    chosen = merging[0] if layer_sel == "first" else merging[-1]
    return float(np.mean(chosen.merge_similarities))


def aggregate_lowest(samples: Sequence[float | None], n: int = 500) -> float:
    """Mean of the n lowest defined per-sample values (None entries skipped)."""
    vals = sorted(s for s in samples if s is not None)
    if not vals:
        raise DegenerateInputError("no defined samples to aggregate")
    return float(np.mean(vals[:n]))


def merged_topk_overlap(run: RunDiag, q_percent: float) -> float:
    """Share (%) of first-merge-layer merged tokens ranked in the top q% by
    class attention. 0.0 when the run never merged."""
    if not 0.0 <= q_percent <= 100.0:
        raise RangeError(f"q_percent must lie in [0, 100], got {q_percent}")
    for ld in run.per_layer:
        if ld.merges_executed > 0:
            top_count = int(math.floor(q_percent * ld.n_scored / 100.0))
            ranks = ld.merged_endpoint_ranks
            hits = sum(1 for r in ranks if r < top_count)
            return 100.0 * hits / len(ranks)
    return 0.0


def adjacency_similarity(batch: TokenBatch) -> float:
    """Mean cosine similarity over all 4-neighbour token pairs on the grid."""
    rows, cols = batch.grid
    feats = batch.features[batch.image_indices()].astype(np.float64)
    if feats.shape[0] != rows * cols:
        raise DimensionError(
            f"{feats.shape[0]} image tokens cannot fill a {rows}x{cols} grid"
        )
    norms = np.linalg.norm(feats, axis=1)
    if not np.all(norms > 0):
        raise DegenerateInputError("zero-norm token feature in adjacency computation")
    unit = (feats / norms[:, None]).reshape(rows, cols, -1)
    horizontal = (unit[:, :-1] * unit[:, 1:]).sum(axis=-1)
    vertical = (unit[:-1, :] * unit[1:, :]).sum(axis=-1)
    pairs = np.concatenate([horizontal.ravel(), vertical.ravel()])
    return float(np.clip(pairs, -1.0, 1.0).mean())


# ---------------------------------------------------------------------------
# harnesses


def bench(
    cfg: ModelConfig,
    rcfg: ReductionConfig,
    batch_size: int,
    iterations: int,
    weights=None,
    seed: int = 0,
) -> dict:
    """Median wall-clock throughput over synthetic inputs, plus the analytic
    schedule and FLOPs for the same configuration."""
    from . import vit  # deferred: vit imports this module at load time

    if batch_size < 1 or iterations < 1:
        raise RangeError("batch_size and iterations must be positive")
    if weights is None:
        weights = vit.init_random(cfg, seed)
    side = cfg.grid_side * cfg.patch_size
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0xBE)))
    images = [rng.random((3, side, side)).astype(np.float32) for _ in range(batch_size)]

    for image in images[: min(2, batch_size)]:  # warmup
        vit.forward_image(image, weights, rcfg)
    times = []
    for _ in range(iterations):
        start = time.perf_counter()
        for image in images:
            vit.forward_image(image, weights, rcfg)
        times.append(time.perf_counter() - start)
    median = statistics.median(times)
    schedule = token_schedule(cfg, rcfg)
    return {
        "images_per_second": batch_size / median,
        "median_seconds": median,
        "flops": flops_count(cfg, schedule),
        "schedule": schedule,
        "batch_size": batch_size,
        "iterations": iterations,
    }


def mask_eval(
    weights,
    images: Sequence[np.ndarray],
    labels: Sequence[int],
    k_list: Sequence[int],
    seed: int,
    reduction: ReductionConfig | None = None,
) -> list[dict]:
    """Top-1 accuracy under k random patch masks, one row per k.

    Mask placement for image i at mask count k derives from (seed, k, i), so
    every (k, image) cell is reproducible independently of evaluation order.
    """
    from . import vit

    if len(images) != len(labels):
        raise DimensionError(f"{len(images)} images vs {len(labels)} labels")
    if not images:
        raise DegenerateInputError("empty image set")

    def predict(args) -> int:
        k, idx, image = args
        mask_seed = int(np.random.SeedSequence((seed, k, idx)).generate_state(1)[0])
        masked = apply_random_masks(image, k, mask_seed)
        logits, _ = vit.forward_image(masked, weights, reduction)
        return int(np.argmax(logits))

    rows = []
    with ThreadPoolExecutor(max_workers=max_workers(len(images))) as pool:
        for k in k_list:
            jobs = [(k, i, img) for i, img in enumerate(images)]
            preds = list(pool.map(predict, jobs))
            correct = sum(1 for pred, label in zip(preds, labels) if pred == int(label))
            rows.append(
                {
                    "k": int(k),
                    "correct": correct,
                    "total": len(images),
                    "accuracy": correct / len(images),
                }
            )
    return rows

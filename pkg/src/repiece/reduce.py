"""Token-reduction strategies and their shared primitives.

Three reducing strategies operate on a TokenBatch between the attention and MLP
halves of an encoder layer:

- "imagepiece": retokenization. The least class-attentive tokens (bottom-k)
  are split into two interleaved groups, each group-A token is matched to its
  most similar group-B token, and the top-m pairs are merged into weighted-mean
  abstractions. Attentive tokens are never touched. At designated layers the
  post-merge batch is additionally pruned by class attention.
- "evit": attentiveness pruning. The least class-attentive tokens are dropped
  at designated layers, optionally fused into one attention-weighted token.
- "tome": similarity merging over *all* image tokens, alternating by sequence
  position, a fixed number of pairs per layer.

All selection is deterministic: every tie breaks toward the lower index.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Sequence

import numpy as np

from . import numerics
from .config import ReductionConfig
from .embed import TokenBatch
from .errors import DimensionError, RangeError

if TYPE_CHECKING:
    from .vit import AttentionRecord


@dataclass(frozen=True)
class MatchPlan:
    """Candidate merge edges between groups A and B, best-first.

    edges: (position in A, position in B, cosine similarity), sorted by
    similarity descending (ties: lower A position first). Each A position
    appears at most once; B positions may repeat.
    a_indices/b_indices: the global token indices the group positions refer to.
    """

    edges: tuple[tuple[int, int, float], ...]
    a_indices: tuple[int, ...]
    b_indices: tuple[int, ...]


@dataclass
class StepInfo:
    """What one reduction step did, for diagnostics accumulation."""

    merges_executed: int = 0
    merge_similarities: list[float] = field(default_factory=list)
    bottom_k_ids: list[int] = field(default_factory=list)
    merged_token_ids: list[int] = field(default_factory=list)  # ids of merge results
    merged_endpoint_ranks: list[int] = field(default_factory=list)
    n_scored: int = 0
    pruned_size: int = 0
    pruned_patches: frozenset[int] = frozenset()
    scores_by_id: dict[int, float] = field(default_factory=dict)


def score_tokens(record: "AttentionRecord", batch: TokenBatch) -> np.ndarray:
    """Per-token importance: the class-attention vector, CLS pinned to +inf.

    The +inf sentinel keeps the class token out of every bottom-k selection.
    """
    scores = np.asarray(record.class_attention, dtype=np.float64)
    if scores.shape[0] != batch.n_tokens:
        raise DimensionError(
            f"attention record covers {scores.shape[0]} tokens, batch has {batch.n_tokens}"
        )
    scores = scores.copy()
    if batch.cls_index is not None:
        scores[batch.cls_index] = np.inf
    return scores


def matching_metric(record: "AttentionRecord") -> np.ndarray:
    """Similarity feature space for matching: key vectors averaged across heads."""
    keys = np.asarray(record.keys, dtype=np.float32)
    n = keys.shape[0]
    return keys.reshape(n, record.heads, -1).mean(axis=1)


def bottom_k_count(n_img: int, p: float) -> int:
    """Size of the non-semantic set: floor(p * n_img), rounded down to even."""
    k = int(math.floor(p * n_img))
    return k - (k % 2)


def merge_budget(n_img: int, merge_ratio: float, p: float) -> int:
    """Merges per retokenization: floor(merge_ratio * n_img), capped by the edge count."""
    return min(int(math.floor(merge_ratio * n_img)), bottom_k_count(n_img, p) // 2)


def keep_count(n_img: int, keep_rate: float) -> int:
    """Image tokens surviving a prune: ceil(keep_rate * n_img)."""
    return min(n_img, int(math.ceil(keep_rate * n_img)))


def select_bottom_k(scores: np.ndarray, p: float) -> list[int]:
    """Indices of the k lowest-scoring tokens, ascending by (score, index).

    k = floor(p * n) rounded down to even, where n counts only finite scores
    (+inf sentinels, i.e. CLS, are excluded from both n and the result).
    """
    if not 0.0 < p < 1.0:
        raise RangeError(f"p must lie in (0, 1), got {p}")
    scores = np.asarray(scores, dtype=np.float64)
    n_img = int(np.isfinite(scores).sum())
    k = bottom_k_count(n_img, p)
    if k == 0:
        return []
    order = np.lexsort((np.arange(scores.shape[0]), scores))
    return [int(i) for i in order[:k]]


def alternating_split(bottom: Sequence[int]) -> tuple[list[int], list[int]]:
    """Deal a score-ascending index list into two equal groups, alternating."""
    if len(bottom) % 2:
        raise DimensionError(f"alternating_split needs an even-length list, got {len(bottom)}")
    return list(bottom[0::2]), list(bottom[1::2])


def bipartite_soft_match(
    a_keys: np.ndarray,
    b_keys: np.ndarray,
    a_indices: Sequence[int] | None = None,
    b_indices: Sequence[int] | None = None,
) -> MatchPlan:
    """Connect each A token to its most similar B token, best edges first.

    Similarity is cosine over the supplied key vectors. Ties in the per-A
    argmax go to the lowest B position; the edge list is sorted by similarity
    descending with ties to the lower A position.
    """
    a_keys = np.atleast_2d(numerics.as_f32(a_keys))
    b_keys = np.atleast_2d(numerics.as_f32(b_keys))
    if a_keys.shape[0] == 0 or b_keys.shape[0] == 0:
        return MatchPlan(edges=(), a_indices=(), b_indices=())
    if a_indices is None:
        a_indices = range(a_keys.shape[0])
    if b_indices is None:
        b_indices = range(b_keys.shape[0])
    sims = numerics.cosine_similarity_matrix(a_keys, b_keys).astype(np.float64)
    best_b = sims.argmax(axis=1)  # first occurrence wins ties
    best_sim = sims[np.arange(sims.shape[0]), best_b]
    order = np.lexsort((np.arange(sims.shape[0]), -best_sim))
    edges = tuple((int(a), int(best_b[a]), float(best_sim[a])) for a in order)
    return MatchPlan(edges=edges, a_indices=tuple(a_indices), b_indices=tuple(b_indices))


def apply_merge(batch: TokenBatch, plan: MatchPlan, m: int) -> TokenBatch:
    """Execute the top-m edges of a plan as size-weighted mean merges.

    A B token that receives several selected edges absorbs all its A partners
    in one multi-way weighted mean. Merged tokens keep the B token's sequence
    position; A-side tokens disappear, so the token count drops by exactly m.
    """
    if m > len(plan.edges):
        raise RangeError(f"m={m} exceeds {len(plan.edges)} candidate edges")
    if m <= 0:
        return batch

    absorbed: dict[int, list[int]] = {}
    for a_pos, b_pos, _ in plan.edges[:m]:
        absorbed.setdefault(plan.b_indices[b_pos], []).append(plan.a_indices[a_pos])
    dropped = {a for partners in absorbed.values() for a in partners}

    feats = batch.features.astype(np.float64)
    sizes = batch.sizes
    new_feats: list[np.ndarray] = []
    new_sizes: list[int] = []
    new_prov: list[frozenset[int]] = []
    new_cls = None
    for i in range(batch.n_tokens):
        if i in dropped:
            continue
        if i in absorbed:
            members = [i] + absorbed[i]
            weights = sizes[members].astype(np.float64)
            merged = (weights[:, None] * feats[members]).sum(axis=0) / weights.sum()
            new_feats.append(merged)
            new_sizes.append(int(weights.sum()))
            prov = frozenset().union(*(batch.provenance[j] for j in members))
            new_prov.append(prov)
        else:
            new_feats.append(feats[i])
            new_sizes.append(int(sizes[i]))
            new_prov.append(batch.provenance[i])
        if batch.cls_index is not None and i == batch.cls_index:
            new_cls = len(new_feats) - 1
    return TokenBatch(
        features=numerics.as_f32(np.stack(new_feats)),
        sizes=np.asarray(new_sizes, dtype=np.int64),
        provenance=tuple(new_prov),
        cls_index=new_cls,
        grid=batch.grid,
    )


def _keep_selection(
    batch: TokenBatch, scores: np.ndarray, keep_rate: float
) -> tuple[list[int], list[int]]:
    """Split image-token indices into (kept, dropped) by descending score."""
    if not 0.0 < keep_rate <= 1.0:
        raise RangeError(f"keep_rate must lie in (0, 1], got {keep_rate}")
    img = batch.image_indices()
    keep = keep_count(img.shape[0], keep_rate)
    img_scores = np.asarray(scores, dtype=np.float64)[img]
    order = np.lexsort((img, -img_scores))
    kept = sorted(int(img[j]) for j in order[:keep])
    dropped = sorted(int(img[j]) for j in order[keep:])
    return kept, dropped


def prune_keep(
    batch: TokenBatch, scores: np.ndarray, keep_rate: float
) -> tuple[TokenBatch, int]:
    """Keep CLS plus the ceil(keep_rate * n_img) best-scoring image tokens.

    Survivors stay in sequence order. Returns the batch and the total size
    (original-patch count) that was discarded.
    """
    kept, dropped = _keep_selection(batch, scores, keep_rate)
    if not dropped:
        return batch, 0
    survivors = sorted(kept + ([batch.cls_index] if batch.cls_index is not None else []))
    pruned_size = int(batch.sizes[dropped].sum())
    new_cls = survivors.index(batch.cls_index) if batch.cls_index is not None else None
    return (
        TokenBatch(
            features=batch.features[survivors].copy(),
            sizes=batch.sizes[survivors].copy(),
            provenance=tuple(batch.provenance[i] for i in survivors),
            cls_index=new_cls,
            grid=batch.grid,
        ),
        pruned_size,
    )


def _token_id(batch: TokenBatch, i: int) -> int:
    prov = batch.provenance[i]
    return min(prov) if prov else -1


def _image_ranks(scores: np.ndarray, batch: TokenBatch) -> dict[int, int]:
    """Attentiveness rank (0 = most attentive) per global token index.

    Defined as the exact mirror of the bottom-k ascending order, so a token
    inside the bottom-k can never hold a top rank even when scores tie.
    """
    img = batch.image_indices()
    img_scores = np.asarray(scores, dtype=np.float64)[img]
    ascending = np.lexsort((img, img_scores))
    n = img.shape[0]
    return {int(img[j]): n - 1 - pos for pos, j in enumerate(ascending)}


def _begin_step(batch: TokenBatch, scores: np.ndarray) -> StepInfo:
    info = StepInfo()
    info.n_scored = batch.n_image_tokens
    info.scores_by_id = {
        _token_id(batch, int(i)): float(scores[int(i)]) for i in batch.image_indices()
    }
    return info


def step_none(batch: TokenBatch, record: "AttentionRecord") -> tuple[TokenBatch, StepInfo]:
    """No reduction; still records the scores so diagnostics see every layer."""
    return batch, _begin_step(batch, score_tokens(record, batch))


def step_imagepiece(
    batch: TokenBatch,
    record: "AttentionRecord",
    cfg: ReductionConfig,
    layer: int,
) -> tuple[TokenBatch, StepInfo]:
    """One retokenization step: score, merge within the bottom-k, then maybe prune.

    Scoring uses the class attention captured by this layer's attention pass.
    Only bottom-k tokens ever appear in a merge; the merged abstractions are
    re-scored by the *next* layer's attention (that is the re-organization).
    When this layer also prunes, the prune scores are this layer's class
    attention restricted to the post-merge survivors and renormalized.
    """
    scores = score_tokens(record, batch)
    info = _begin_step(batch, scores)
    survivor_origin = list(range(batch.n_tokens))

    if cfg.retokenize_at(layer):
        bottom = select_bottom_k(scores, cfg.nonsemantic_proportion)
        info.bottom_k_ids = [_token_id(batch, i) for i in bottom]
        if bottom:
            a_idx, b_idx = alternating_split(bottom)
            metric = matching_metric(record)
            plan = bipartite_soft_match(metric[a_idx], metric[b_idx], a_idx, b_idx)
            m = merge_budget(batch.n_image_tokens, cfg.merge_ratio, cfg.nonsemantic_proportion)
            m = min(m, len(plan.edges))
            if m > 0:
                ranks = _image_ranks(scores, batch)
                executed = plan.edges[:m]
                merged_a = [plan.a_indices[a] for a, _, _ in executed]
                merged_b = sorted({plan.b_indices[b] for _, b, _ in executed})
                info.merge_similarities = [float(s) for _, _, s in executed]
                info.merged_endpoint_ranks = [ranks[i] for i in merged_a + merged_b]
                pre_batch = batch
                batch = apply_merge(batch, plan, m)
                info.merges_executed = m
                dropped = set(merged_a)
                survivor_origin = [i for i in range(pre_batch.n_tokens) if i not in dropped]
                info.merged_token_ids = [
                    _token_id(batch, j)
                    for j, orig in enumerate(survivor_origin)
                    if orig in set(merged_b)
                ]

    if cfg.prune_at(layer):
        restricted = np.asarray(record.class_attention, dtype=np.float64)[survivor_origin]
        total = restricted[np.isfinite(restricted)].sum()
        prune_scores = restricted / total if total > 0 else restricted
        if batch.cls_index is not None:
            prune_scores[batch.cls_index] = np.inf
        pre_prov = set().union(*batch.provenance)
        batch, pruned = prune_keep(batch, prune_scores, cfg.keep_rate)
        info.pruned_size = pruned
        if pruned:
            info.pruned_patches = frozenset(pre_prov - set().union(*batch.provenance))
    return batch, info


def step_evit(
    batch: TokenBatch,
    record: "AttentionRecord",
    keep_rate: float,
    fuse: bool = True,
) -> tuple[TokenBatch, StepInfo]:
    """Attentiveness pruning: drop the least class-attentive image tokens.

    With fuse enabled the dropped tokens survive as one extra token, their
    attention-weighted average, appended after the kept tokens and carrying
    the union provenance.
    """
    scores = score_tokens(record, batch)
    info = _begin_step(batch, scores)
    kept, dropped = _keep_selection(batch, scores, keep_rate)
    if not dropped:
        return batch, info

    survivors = sorted(kept + ([batch.cls_index] if batch.cls_index is not None else []))
    feats = [batch.features[survivors]]
    sizes = list(batch.sizes[survivors])
    prov = [batch.provenance[i] for i in survivors]
    new_cls = survivors.index(batch.cls_index) if batch.cls_index is not None else None

    if fuse:
        att = np.asarray(record.class_attention, dtype=np.float64)[dropped]
        weights = att / att.sum() if att.sum() > 0 else np.full(len(dropped), 1.0 / len(dropped))
        fused = (weights[:, None] * batch.features[dropped].astype(np.float64)).sum(axis=0)
        feats.append(fused[None, :].astype(np.float32))
        sizes.append(int(batch.sizes[dropped].sum()))
        prov.append(frozenset().union(*(batch.provenance[i] for i in dropped)))
    else:
        info.pruned_size = int(batch.sizes[dropped].sum())
        info.pruned_patches = frozenset().union(*(batch.provenance[i] for i in dropped))

    batch = TokenBatch(
        features=numerics.as_f32(np.concatenate(feats, axis=0)),
        sizes=np.asarray(sizes, dtype=np.int64),
        provenance=tuple(prov),
        cls_index=new_cls,
        grid=batch.grid,
    )
    return batch, info


def step_tome(
    batch: TokenBatch,
    record: "AttentionRecord",
    r_per_layer: int,
) -> tuple[TokenBatch, StepInfo]:
    """Global similarity merging: alternate all image tokens by sequence position,
    match on head-averaged keys, merge the best r pairs. No pruning."""
    if r_per_layer < 0:
        raise RangeError(f"r_per_layer must be >= 0, got {r_per_layer}")
    scores = score_tokens(record, batch)
    info = _begin_step(batch, scores)
    if r_per_layer == 0:
        return batch, info
    img = [int(i) for i in batch.image_indices()]
    a_idx, b_idx = img[0::2], img[1::2]
    metric = matching_metric(record)
    plan = bipartite_soft_match(metric[a_idx], metric[b_idx], a_idx, b_idx)
    m = min(r_per_layer, len(plan.edges))
    if m == 0:
        return batch, info
    ranks = _image_ranks(scores, batch)
    executed = plan.edges[:m]
    merged_a = [plan.a_indices[a] for a, _, _ in executed]
    merged_b = sorted({plan.b_indices[b] for _, b, _ in executed})
    info.merge_similarities = [float(s) for _, _, s in executed]
    info.merged_endpoint_ranks = [ranks[i] for i in merged_a + merged_b]
    pre_batch = batch
    batch = apply_merge(batch, plan, m)
    info.merges_executed = m
    dropped = set(merged_a)
    survivor_origin = [i for i in range(pre_batch.n_tokens) if i not in dropped]
    info.merged_token_ids = [
        _token_id(batch, j) for j, orig in enumerate(survivor_origin) if orig in set(merged_b)
    ]
    return batch, info

"""Image tokenization: grid patchifier, overlapping-conv stem, CLS/positions, masking.

A TokenBatch carries, next to the features, the bookkeeping every reduction
strategy relies on: how many original patches each token stands for (its size)
and exactly which grid cells those are (its provenance). Provenance sets stay
pairwise disjoint through every transformation, so at any point in the encoder
the surviving tokens plus the pruned cells partition the original patch grid.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import numerics
from .config import MASK_SIZE
from .errors import DimensionError, FormatError, RangeError


@dataclass(frozen=True)
class TokenBatch:
    """Token features plus per-token merge weight and patch provenance.

    features: [N x D] float32
    sizes: [N] int64, number of original patches behind each token (CLS: 1)
    provenance: per-token frozenset of patch-grid indices (CLS: empty)
    cls_index: position of the class token, or None before finalize
    grid: (rows, cols) of the original patch grid
    """

    features: np.ndarray
    sizes: np.ndarray
    provenance: tuple[frozenset[int], ...]
    cls_index: int | None
    grid: tuple[int, int]

    @property
    def n_tokens(self) -> int:
        return self.features.shape[0]

    @property
    def n_image_tokens(self) -> int:
        return self.n_tokens - (0 if self.cls_index is None else 1)

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def image_indices(self) -> np.ndarray:
        """Positions of non-CLS tokens, in sequence order."""
        idx = np.arange(self.n_tokens)
        if self.cls_index is None:
            return idx
        return idx[idx != self.cls_index]

    def with_features(self, features: np.ndarray) -> "TokenBatch":
        if features.shape != self.features.shape:
            raise DimensionError(
                f"replacement features {features.shape} != {self.features.shape}"
            )
        return replace(self, features=numerics.as_f32(features))

    def validate(self) -> None:
        """Check the structural invariants; used by tests, not on the hot path."""
        n = self.n_tokens
        assert self.sizes.shape == (n,) and len(self.provenance) == n
        seen: set[int] = set()
        for i in range(n):
            if self.cls_index is not None and i == self.cls_index:
                assert self.sizes[i] == 1 and not self.provenance[i]
                continue
            assert self.sizes[i] == len(self.provenance[i]) > 0
            assert not (self.provenance[i] & seen), "provenance sets overlap"
            seen |= self.provenance[i]
        assert seen <= set(range(self.grid[0] * self.grid[1]))


def token_ids(batch: TokenBatch) -> np.ndarray:
    """Stable per-token identity: the smallest patch index a token contains.

    A token keeps its provenance set (and hence this id) from one layer to the
    next unless it is merged again or pruned, so the id can track a merged
    abstraction across layers for the diagnostics. CLS gets -1.
    """
    ids = np.empty(batch.n_tokens, dtype=np.int64)
    for i, prov in enumerate(batch.provenance):
        ids[i] = min(prov) if prov else -1
    return ids


@dataclass(frozen=True)
class StemWeights:
    """Weights of the overlapping-conv stem plus the shared CLS/positional tables."""

    conv_kernels: tuple[np.ndarray, ...]  # four [C_out x C_in x 3 x 3]
    conv_biases: tuple[np.ndarray, ...]
    proj_kernel: np.ndarray  # [D x C4 x 1 x 1]
    proj_bias: np.ndarray  # [D]
    positional: np.ndarray  # [(P+1) x D]
    cls_embedding: np.ndarray  # [D]


def _singleton_provenance(n: int) -> tuple[frozenset[int], ...]:
    return tuple(frozenset((i,)) for i in range(n))


def patchify_embed(
    image: np.ndarray,
    patch_size: int,
    projection: np.ndarray,
    bias: np.ndarray,
) -> TokenBatch:
    """One token per non-overlapping patch: flatten (c, y, x order) and project.

    image: [3 x H x W]; projection: [(3*patch_size^2) x D]; bias: [D].
    """
    image = numerics.as_f32(image)
    if image.ndim != 3:
        raise DimensionError(f"expected CxHxW image, got shape {image.shape}")
    c, h, w = image.shape
    if h % patch_size or w % patch_size:
        raise DimensionError(f"image {h}x{w} not divisible by patch_size {patch_size}")
    rows, cols = h // patch_size, w // patch_size
    projection = numerics.as_f32(projection)
    if projection.shape[0] != c * patch_size * patch_size:
        raise DimensionError(
            f"projection rows {projection.shape[0]} != {c * patch_size * patch_size}"
        )
    patches = (
        image.reshape(c, rows, patch_size, cols, patch_size)
        .transpose(1, 3, 0, 2, 4)
        .reshape(rows * cols, c * patch_size * patch_size)
    )
    feats = numerics.matmul(patches, projection) + numerics.as_f32(bias)
    n = rows * cols
    return TokenBatch(
        features=numerics.as_f32(feats),
        sizes=np.ones(n, dtype=np.int64),
        provenance=_singleton_provenance(n),
        cls_index=None,
        grid=(rows, cols),
    )


def coherence_stem(image: np.ndarray, weights: StemWeights) -> TokenBatch:
    """Tokenize through four stride-2 3x3 convolutions (GELU after each) and a 1x1 projection.

    Overlapping receptive fields entangle neighboring cells, so spatially
    adjacent tokens come out more similar than under the grid patchifier.
    224 -> 112 -> 56 -> 28 -> 14; the final map is flattened row-major.
    """
    x = numerics.as_f32(image)
    if x.ndim != 3:
        raise DimensionError(f"expected CxHxW image, got shape {x.shape}")
    for kernel, bias in zip(weights.conv_kernels, weights.conv_biases):
        x = numerics.gelu(numerics.conv2d(x, kernel, bias, stride=2, padding=1))
    x = numerics.conv2d(x, weights.proj_kernel, weights.proj_bias, stride=1, padding=0)
    d, rows, cols = x.shape
    n = rows * cols
    feats = x.reshape(d, n).T
    return TokenBatch(
        features=numerics.as_f32(feats),
        sizes=np.ones(n, dtype=np.int64),
        provenance=_singleton_provenance(n),
        cls_index=None,
        grid=(rows, cols),
    )


def finalize_tokens(
    batch: TokenBatch,
    positional: np.ndarray,
    cls_embedding: np.ndarray,
) -> TokenBatch:
    """Prepend the class token and add positional embeddings."""
    if batch.cls_index is not None:
        raise DimensionError("batch already has a class token")
    positional = numerics.as_f32(positional)
    cls_embedding = numerics.as_f32(cls_embedding)
    p = batch.n_tokens
    if positional.shape != (p + 1, batch.dim):
        raise DimensionError(
            f"positional table {positional.shape} does not match {p + 1} tokens of dim {batch.dim}"
        )
    feats = np.concatenate([cls_embedding[None, :], batch.features], axis=0) + positional
    return TokenBatch(
        features=numerics.as_f32(feats),
        sizes=np.concatenate([[1], batch.sizes]).astype(np.int64),
        provenance=(frozenset(),) + batch.provenance,
        cls_index=0,
        grid=batch.grid,
    )


def apply_random_masks(image: np.ndarray, k: int, seed: int) -> np.ndarray:
    """Zero out k distinct grid-aligned 16x16 regions, chosen uniformly by seed."""
    image = numerics.as_f32(image)
    if image.ndim != 3:
        raise DimensionError(f"expected CxHxW image, got shape {image.shape}")
    _, h, w = image.shape
    rows, cols = h // MASK_SIZE, w // MASK_SIZE
    cells = rows * cols
    if not 0 <= k <= cells:
        raise RangeError(f"k={k} outside [0, {cells}] for a {rows}x{cols} mask grid")
    out = image.copy()
    if k == 0:
        return out
    rng = np.random.default_rng(seed)
    chosen = rng.choice(cells, size=k, replace=False)
    for cell in chosen:
        r, c = divmod(int(cell), cols)
        out[:, r * MASK_SIZE : (r + 1) * MASK_SIZE, c * MASK_SIZE : (c + 1) * MASK_SIZE] = 0.0
    return out


def read_ppm(path: str | Path) -> np.ndarray:
    """Read a binary P6 PPM (8-bit RGB) as a [3 x H x W] float32 image in [0, 1]."""
    data = Path(path).read_bytes()

    pos = 0

    def next_token() -> bytes:
        nonlocal pos
        while pos < len(data):
            if data[pos : pos + 1].isspace():
                pos += 1
            elif data[pos : pos + 1] == b"#":
                while pos < len(data) and data[pos : pos + 1] != b"\n":
                    pos += 1
            else:
                break
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError(f"{path}: truncated PPM header")
        return data[start:pos]

    if next_token() != b"P6":
        raise FormatError(f"{path}: not a binary P6 PPM")
    try:
        w, h, maxval = int(next_token()), int(next_token()), int(next_token())
    except ValueError as exc:
        raise FormatError(f"{path}: bad PPM header") from exc
    if maxval != 255:
        raise FormatError(f"{path}: only 8-bit PPMs supported, maxval={maxval}")
    pos += 1  # single whitespace after maxval
    pixels = np.frombuffer(data, dtype=np.uint8, offset=pos)
    if pixels.size < 3 * h * w:
        raise FormatError(f"{path}: pixel data truncated")
    rgb = pixels[: 3 * h * w].reshape(h, w, 3).transpose(2, 0, 1)
    return (rgb.astype(np.float32) / 255.0).copy()


def write_ppm(image: np.ndarray, path: str | Path) -> None:
    """Write a [3 x H x W] float32 image in [0, 1] as a binary P6 PPM."""
    image = numerics.as_f32(image)
    if image.ndim != 3 or image.shape[0] != 3:
        raise DimensionError(f"expected 3xHxW image, got shape {image.shape}")
    _, h, w = image.shape
    rgb = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(rgb.transpose(1, 2, 0).tobytes())

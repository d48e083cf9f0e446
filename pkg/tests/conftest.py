import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))  # make oracles importable

from repiece.config import ModelConfig, ReductionConfig
from repiece.embed import TokenBatch


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config():
    """Four layers, 16-dim, 10 classes, 14x14 grid — cheap but full-shaped."""
    return ModelConfig(depth=4, heads=2, dim=16, num_classes=10)


def make_batch(rng, n_img=8, dim=16, with_cls=True, grid=None):
    """Random finalized-style batch with singleton provenance."""
    n = n_img + (1 if with_cls else 0)
    feats = rng.standard_normal((n, dim)).astype(np.float32)
    sizes = np.ones(n, dtype=np.int64)
    if grid is None:
        side = int(np.ceil(np.sqrt(n_img)))
        grid = (side, side)
    prov = []
    cls_index = None
    patch = 0
    for i in range(n):
        if with_cls and i == 0:
            prov.append(frozenset())
            cls_index = 0
        else:
            prov.append(frozenset({patch}))
            patch += 1
    return TokenBatch(
        features=feats,
        sizes=sizes,
        provenance=tuple(prov),
        cls_index=cls_index,
        grid=grid,
    )


@pytest.fixture
def small_batch(rng):
    return make_batch(rng)


def random_block(rng, dim, heads, hidden=None, std=0.5):
    """Random encoder-block weights at a scale that keeps attention well-mixed."""
    from repiece.vit import BlockWeights

    hidden = hidden or 4 * dim
    return BlockWeights(
        ln1_gamma=rng.uniform(0.5, 1.5, dim).astype(np.float32),
        ln1_beta=rng.standard_normal(dim).astype(np.float32) * 0.1,
        qkv_weight=(rng.standard_normal((dim, 3 * dim)) * std).astype(np.float32),
        qkv_bias=(rng.standard_normal(3 * dim) * 0.1).astype(np.float32),
        proj_weight=(rng.standard_normal((dim, dim)) * std).astype(np.float32),
        proj_bias=(rng.standard_normal(dim) * 0.1).astype(np.float32),
        ln2_gamma=rng.uniform(0.5, 1.5, dim).astype(np.float32),
        ln2_beta=rng.standard_normal(dim).astype(np.float32) * 0.1,
        fc1_weight=(rng.standard_normal((dim, hidden)) * std).astype(np.float32),
        fc1_bias=(rng.standard_normal(hidden) * 0.1).astype(np.float32),
        fc2_weight=(rng.standard_normal((hidden, dim)) * std).astype(np.float32),
        fc2_bias=(rng.standard_normal(dim) * 0.1).astype(np.float32),
        heads=heads,
    )

import numpy as np
import pytest

from repiece import embed
from repiece.config import ModelConfig
from repiece.errors import DimensionError, FormatError, RangeError
from repiece.vit import init_random


def test_patchify_shapes_and_bookkeeping(rng):
    image = rng.random((3, 32, 32)).astype(np.float32)
    proj = rng.standard_normal((3 * 16 * 16, 8)).astype(np.float32)
    batch = embed.patchify_embed(image, 16, proj, np.zeros(8, np.float32))
    assert batch.features.shape == (4, 8)
    assert batch.grid == (2, 2)
    assert batch.cls_index is None
    assert np.all(batch.sizes == 1)
    assert batch.provenance == tuple(frozenset((i,)) for i in range(4))
    batch.validate()


def test_patchify_constant_image_with_sum_projection():
    # all-ones projection turns each feature into the sum over the patch
    image = np.full((3, 4, 4), 0.5, dtype=np.float32)
    proj = np.ones((3 * 2 * 2, 1), np.float32)
    batch = embed.patchify_embed(image, 2, proj, np.zeros(1, np.float32))
    assert np.allclose(batch.features, 0.5 * 12)


def test_patchify_reads_patches_in_row_major_cyx_order():
    # 1-pixel patches: the feature of patch (r, c) is just the pixel stack there
    image = np.arange(2 * 2 * 3, dtype=np.float32).reshape(3, 2, 2)
    proj = np.eye(3, dtype=np.float32)
    batch = embed.patchify_embed(image, 1, proj, np.zeros(3, np.float32))
    assert np.array_equal(batch.features[0], image[:, 0, 0])
    assert np.array_equal(batch.features[1], image[:, 0, 1])
    assert np.array_equal(batch.features[3], image[:, 1, 1])


def test_patchify_rejects_indivisible_image():
    with pytest.raises(DimensionError):
        embed.patchify_embed(
            np.zeros((3, 30, 32), np.float32), 16, np.zeros((768, 4), np.float32), np.zeros(4, np.float32)
        )


def test_coherence_stem_grid(rng):
    cfg = ModelConfig(depth=0, heads=1, dim=8, num_classes=2, stem="coherence", stem_base=2)
    weights = init_random(cfg, seed=0)
    image = rng.random((3, 224, 224)).astype(np.float32)
    batch = embed.coherence_stem(image, weights.stem_weights())
    assert batch.features.shape == (196, 8)
    assert batch.grid == (14, 14)
    assert batch.cls_index is None
    batch.validate()


def test_finalize_prepends_cls_and_positions(rng):
    image = rng.random((3, 4, 4)).astype(np.float32)
    proj = rng.standard_normal((12, 6)).astype(np.float32)
    batch = embed.patchify_embed(image, 2, proj, np.zeros(6, np.float32))
    positional = rng.standard_normal((5, 6)).astype(np.float32)
    cls_vec = rng.standard_normal(6).astype(np.float32)
    full = embed.finalize_tokens(batch, positional, cls_vec)
    assert full.n_tokens == 5 and full.cls_index == 0
    assert full.provenance[0] == frozenset() and full.sizes[0] == 1
    assert np.allclose(full.features[0], cls_vec + positional[0], atol=1e-6)
    assert np.allclose(full.features[1:], batch.features + positional[1:], atol=1e-6)
    with pytest.raises(DimensionError):
        embed.finalize_tokens(full, positional, cls_vec)


def test_finalize_checks_positional_table_size(rng):
    image = rng.random((3, 4, 4)).astype(np.float32)
    batch = embed.patchify_embed(image, 2, rng.standard_normal((12, 6)).astype(np.float32), np.zeros(6, np.float32))
    with pytest.raises(DimensionError):
        embed.finalize_tokens(batch, np.zeros((4, 6), np.float32), np.zeros(6, np.float32))


# ---------------------------------------------------------------- masking

def test_masks_zero_exact_pixel_count(rng):
    image = rng.uniform(0.1, 1.0, (3, 224, 224)).astype(np.float32)
    for k in (1, 7, 25):
        masked = embed.apply_random_masks(image, k, seed=42)
        assert masked.shape == image.shape
        assert int(np.sum(masked == 0.0)) == 3 * k * 256


def test_masks_are_grid_aligned(rng):
    image = rng.uniform(0.1, 1.0, (3, 224, 224)).astype(np.float32)
    masked = embed.apply_random_masks(image, 5, seed=7)
    zero_cells = 0
    for r in range(14):
        for c in range(14):
            block = masked[:, r * 16 : (r + 1) * 16, c * 16 : (c + 1) * 16]
            if np.all(block == 0.0):
                zero_cells += 1
            else:
                assert np.array_equal(block, image[:, r * 16 : (r + 1) * 16, c * 16 : (c + 1) * 16])
    assert zero_cells == 5


def test_masks_deterministic_per_seed(rng):
    image = rng.random((3, 224, 224)).astype(np.float32)
    a = embed.apply_random_masks(image, 10, seed=3)
    b = embed.apply_random_masks(image, 10, seed=3)
    c = embed.apply_random_masks(image, 10, seed=4)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


def test_mask_k_zero_is_copy(rng):
    image = rng.random((3, 224, 224)).astype(np.float32)
    out = embed.apply_random_masks(image, 0, seed=0)
    assert out is not image and np.array_equal(out, image)


def test_mask_k_out_of_range(rng):
    image = rng.random((3, 224, 224)).astype(np.float32)
    with pytest.raises(RangeError):
        embed.apply_random_masks(image, 197, seed=0)
    with pytest.raises(RangeError):
        embed.apply_random_masks(image, -1, seed=0)


# ---------------------------------------------------------------- ppm i/o

def test_ppm_round_trip_exact(tmp_path, rng):
    raw = rng.integers(0, 256, (3, 6, 5), dtype=np.uint8)
    image = raw.astype(np.float32) / 255.0
    path = tmp_path / "img.ppm"
    embed.write_ppm(image, path)
    back = embed.read_ppm(path)
    assert back.shape == (3, 6, 5)
    assert np.array_equal(np.rint(back * 255).astype(np.uint8), raw)


def test_ppm_header_comments(tmp_path):
    body = bytes(range(12))  # 2x2 RGB
    (tmp_path / "c.ppm").write_bytes(b"P6\n# a comment\n2 2\n# another\n255\n" + body)
    image = embed.read_ppm(tmp_path / "c.ppm")
    assert image.shape == (3, 2, 2)
    assert np.isclose(image[0, 0, 0], 0.0) and np.isclose(image[2, 1, 1], 11 / 255)


def test_ppm_rejects_wrong_magic(tmp_path):
    (tmp_path / "bad.ppm").write_bytes(b"P3\n2 2\n255\n")
    with pytest.raises(FormatError):
        embed.read_ppm(tmp_path / "bad.ppm")


def test_ppm_rejects_truncated_pixels(tmp_path):
    (tmp_path / "short.ppm").write_bytes(b"P6\n4 4\n255\n\x00\x01")
    with pytest.raises(FormatError):
        embed.read_ppm(tmp_path / "short.ppm")


def test_write_ppm_clips_out_of_range(tmp_path):
    image = np.array([[[1.5]], [[-0.2]], [[0.5]]], dtype=np.float32)
    embed.write_ppm(image, tmp_path / "clip.ppm")
    back = embed.read_ppm(tmp_path / "clip.ppm")
    assert back[0, 0, 0] == 1.0 and back[1, 0, 0] == 0.0

import numpy as np
import pytest
from scipy import ndimage

from oneseg.errors import ConfigError
from oneseg.superpixel import (
    SlicConfig,
    pool_labels_to_grid,
    pool_mask_to_grid,
    rgb_to_lab,
    slic_segment,
)

FOUR_CONN = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool)


def perimeter_sum(labels):
    """Total count of 4-adjacent pixel pairs with differing labels."""
    horiz = np.count_nonzero(labels[:, 1:] != labels[:, :-1])
    vert = np.count_nonzero(labels[1:, :] != labels[:-1, :])
    return horiz + vert


def kmeans_oracle(image, k, m, iters=10):
    """Brute-force Lloyd iterations in (lab, scaled-xy) space, no windows."""
    lab = rgb_to_lab(image)
    h, w = lab.shape[:2]
    step = np.sqrt(h * w / k)
    ratio = m / step
    rows = max(1, round(np.sqrt(k * h / w)))
    cols = max(1, round(k / rows))
    cy = (np.arange(rows) + 0.5) * h / rows
    cx = (np.arange(cols) + 0.5) * w / cols
    centers = np.array([[y, x] for y in cy for x in cx])
    feats = lab[np.minimum(centers[:, 0].astype(int), h - 1),
                np.minimum(centers[:, 1].astype(int), w - 1)]
    yy, xx = np.mgrid[0:h, 0:w]
    for _ in range(iters):
        d = np.empty((len(centers), h, w))
        for c in range(len(centers)):
            d_lab = np.sqrt(((lab - feats[c]) ** 2).sum(axis=2))
            d_xy = np.sqrt((yy - centers[c, 0]) ** 2 + (xx - centers[c, 1]) ** 2)
            d[c] = d_lab + ratio * d_xy
        assign = d.argmin(axis=0)
        for c in range(len(centers)):
            sel = assign == c
            if sel.any():
                centers[c] = [yy[sel].mean(), xx[sel].mean()]
                feats[c] = lab[sel].mean(axis=0)
    return assign


class TestSlic:
    def test_uniform_color_area_balance(self):
        image = np.full((100, 100, 3), 120, dtype=np.uint8)
        labels = slic_segment(image, SlicConfig(k_clusters=4))
        ids, counts = np.unique(labels, return_counts=True)
        assert len(ids) == 4
        # color term vanishes, so the spatial Voronoi should stay balanced
        assert np.all(counts >= 2000) and np.all(counts <= 3000)

    def test_two_color_halves(self):
        image = np.zeros((40, 60, 3), dtype=np.uint8)
        image[:, :30] = (200, 40, 40)
        image[:, 30:] = (40, 40, 200)
        cfg = SlicConfig(k_clusters=2, compactness_m=20.0)
        labels = slic_segment(image, cfg)
        truth = (np.arange(60)[None, :] >= 30).astype(int) * np.ones((40, 1), dtype=int)
        # orient labels to the halves by majority on the left half
        left_label = np.bincount(labels[:, :30].ravel()).argmax()
        mapped = (labels != left_label).astype(int)
        agreement = np.mean(mapped == truth)
        assert agreement >= 0.95
        oracle = kmeans_oracle(image, 2, 20.0)
        left_o = np.bincount(oracle[:, :30].ravel()).argmax()
        assert np.mean((oracle != left_o).astype(int) == truth) >= 0.95

    def test_single_pixel_image(self):
        labels = slic_segment(np.zeros((1, 1, 3), dtype=np.uint8))
        assert labels.shape == (1, 1) and labels[0, 0] == 0

    def test_degenerate_fewer_pixels_than_k(self):
        labels = slic_segment(np.zeros((2, 2, 3), dtype=np.uint8), SlicConfig(k_clusters=10))
        assert sorted(labels.ravel().tolist()) == [0, 1, 2, 3]

    def test_partition_and_contiguous_ids(self):
        rng = np.random.default_rng(0)
        image = rng.integers(0, 255, size=(50, 70, 3), dtype=np.uint8)
        labels = slic_segment(image, SlicConfig(k_clusters=8))
        ids, counts = np.unique(labels, return_counts=True)
        assert counts.sum() == 50 * 70
        assert np.array_equal(ids, np.arange(len(ids)))

    def test_connectivity_enforced(self):
        rng = np.random.default_rng(1)
        base = np.full((48, 48, 3), 90, dtype=np.uint8)
        noise = rng.integers(-40, 40, size=base.shape)
        image = np.clip(base.astype(int) + noise, 0, 255).astype(np.uint8)
        labels = slic_segment(image, SlicConfig(k_clusters=6))
        for lbl in np.unique(labels):
            _, n = ndimage.label(labels == lbl, structure=FOUR_CONN)
            assert n == 1

    def test_deterministic(self):
        rng = np.random.default_rng(2)
        image = rng.integers(0, 255, size=(40, 40, 3), dtype=np.uint8)
        a = slic_segment(image, SlicConfig(k_clusters=5))
        b = slic_segment(image, SlicConfig(k_clusters=5))
        np.testing.assert_array_equal(a, b)

    def test_compactness_reduces_boundary_length(self):
        # fixed low-frequency color field with mild pixel noise
        rng = np.random.default_rng(0)
        smooth = ndimage.gaussian_filter(rng.normal(0, 1, (60, 60, 3)), sigma=(6, 6, 0))
        image = np.clip(120 + smooth / np.abs(smooth).max() * 70
                        + rng.normal(0, 4, smooth.shape), 0, 255).astype(np.uint8)
        perims = [perimeter_sum(slic_segment(image, SlicConfig(k_clusters=9, compactness_m=m)))
                  for m in (5.0, 20.0, 50.0)]
        assert perims[0] >= perims[1] >= perims[2]

    def test_config_validation(self):
        with pytest.raises(ConfigError):
            SlicConfig(k_clusters=0)
        with pytest.raises(ConfigError):
            SlicConfig(compactness_m=0.0)


class TestPooling:
    def test_identity_size(self):
        labels = np.arange(12, dtype=np.int32).reshape(3, 4)
        np.testing.assert_array_equal(pool_labels_to_grid(labels, 3, 4), labels)

    def test_exact_quadrants(self):
        labels = np.array([
            [0, 0, 1, 1],
            [0, 0, 1, 1],
            [2, 2, 3, 3],
            [2, 2, 3, 3],
        ], dtype=np.int32)
        np.testing.assert_array_equal(pool_labels_to_grid(labels, 2, 2),
                                      [[0, 1], [2, 3]])

    def test_overlapping_blocks_3x3_to_2x2(self):
        labels = np.array([
            [0, 1, 1],
            [0, 2, 1],
            [2, 2, 2],
        ], dtype=np.int32)
        # blocks: (rows 0-1 x cols 0-1), (rows 0-1 x cols 1-2),
        #         (rows 1-2 x cols 0-1), (rows 1-2 x cols 1-2)
        # memberships hand-enumerated: [0,1,0,2] [1,1,2,1] [0,2,2,2] [2,1,2,2]
        np.testing.assert_array_equal(pool_labels_to_grid(labels, 2, 2),
                                      [[0, 1], [2, 2]])

    def test_tie_goes_to_smallest_id(self):
        labels = np.array([[0, 1], [1, 0]], dtype=np.int32)
        assert pool_labels_to_grid(labels, 1, 1)[0, 0] == 0

    def test_upscale_rejected(self):
        with pytest.raises(ValueError):
            pool_labels_to_grid(np.zeros((2, 2), dtype=np.int32), 3, 2)

    def test_mask_majority(self):
        mask = np.array([[True, False], [False, False]])
        assert pool_mask_to_grid(mask, 1, 1)[0, 0] == np.False_
        mask = np.array([[True, True], [False, False]])
        assert pool_mask_to_grid(mask, 1, 1)[0, 0] == np.True_

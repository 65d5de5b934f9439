import numpy as np
import pytest
from shapely.geometry import MultiPoint, Point

from conftest import plateau_blob_heatmap
from oneseg.errors import AllCandidatesEmpty, ConfigError, EmptyForeground, MissingFixedValue
from oneseg.prior import (
    PriorConfig,
    component_stats,
    geometric_score,
    rasterized_hull_area,
    reference_area,
    refine_candidate,
    select_prior,
    sweep_thresholds,
    threshold_candidates,
)


def hull_area_oracle(ys, xs):
    """Count lattice points covered by shapely's convex hull (boundary inclusive)."""
    hull = MultiPoint([(int(x), int(y)) for y, x in zip(ys, xs)]).convex_hull
    count = 0
    for yy in range(int(min(ys)), int(max(ys)) + 1):
        for xx in range(int(min(xs)), int(max(xs)) + 1):
            if hull.covers(Point(xx, yy)):
                count += 1
    return count


def mask_iou(a, b):
    inter = np.count_nonzero(a & b)
    union = np.count_nonzero(a | b)
    return inter / union if union else 1.0


class TestThresholds:
    def test_default_ladder_has_seven_steps(self):
        taus = sweep_thresholds(PriorConfig())
        assert len(taus) == 7
        np.testing.assert_allclose(taus, [0.40, 0.45, 0.50, 0.55, 0.60, 0.65, 0.70],
                                   atol=1e-9)

    def test_constant_one_gives_full_masks(self):
        cands = threshold_candidates(np.ones((4, 4), dtype=np.float32))
        assert len(cands) == 7 and all(c.all() for c in cands)

    def test_constant_zero_gives_empty_masks(self):
        cands = threshold_candidates(np.zeros((4, 4), dtype=np.float32))
        assert all(not c.any() for c in cands)

    def test_candidates_nested(self):
        rng = np.random.default_rng(0)
        h = rng.random((32, 32)).astype(np.float32)
        cands = threshold_candidates(h)
        for lower, higher in zip(cands, cands[1:]):
            assert not np.any(higher & ~lower)  # higher tau is a subset


class TestRefine:
    def test_small_component_dropped(self):
        mask = np.zeros((30, 40), dtype=bool)
        mask[2:12, 2:12] = True      # 100 pixels
        mask[20:25, 30:33] = True    # 15 pixels < 20% of 100
        out = refine_candidate(mask)
        assert np.count_nonzero(out) == 100
        assert not out[20:25, 30:33].any()

    def test_equal_components_both_kept(self):
        mask = np.zeros((10, 22), dtype=bool)
        mask[2:6, 2:6] = True
        mask[2:6, 16:20] = True
        out = refine_candidate(mask)
        assert np.count_nonzero(out) == 32

    def test_interior_hole_filled(self):
        mask = np.zeros((12, 12), dtype=bool)
        mask[2:10, 2:10] = True
        mask[5:7, 5:7] = False
        out = refine_candidate(mask)
        assert out[5:7, 5:7].all()
        assert np.count_nonzero(out) == 64

    def test_border_notch_not_filled(self):
        mask = np.ones((6, 6), dtype=bool)
        mask[0:3, 2:4] = False  # touches the border: a bay, not a hole
        out = refine_candidate(mask)
        assert not out[0:3, 2:4].any()

    def test_empty_in_empty_out(self):
        out = refine_candidate(np.zeros((5, 5), dtype=bool))
        assert not out.any()

    def test_idempotent(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            mask = rng.random((24, 24)) > 0.6
            once = refine_candidate(mask)
            np.testing.assert_array_equal(refine_candidate(once), once)


class TestHull:
    def test_filled_square_is_convex(self):
        ys, xs = np.nonzero(np.ones((20, 20), dtype=bool))
        assert rasterized_hull_area(ys, xs) == 400

    def test_single_pixel(self):
        assert rasterized_hull_area(np.array([3]), np.array([4])) == 1

    def test_collinear_segment(self):
        ys = np.array([0, 1, 2])
        xs = np.array([0, 1, 2])
        assert rasterized_hull_area(ys, xs) == 3

    def test_against_shapely_oracle(self):
        rng = np.random.default_rng(2)
        for _ in range(25):
            n = int(rng.integers(1, 30))
            ys = rng.integers(0, 15, n)
            xs = rng.integers(0, 15, n)
            assert rasterized_hull_area(ys, xs) == hull_area_oracle(ys, xs)

    def test_hull_never_smaller_than_component(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            mask = rng.random((18, 18)) > 0.72
            for area, hull in component_stats(mask):
                assert hull >= area


class TestScore:
    def test_filled_square_at_reference_scale(self):
        mask = np.zeros((30, 30), dtype=bool)
        mask[4:24, 4:24] = True
        assert abs(geometric_score(mask, a_ref=400) - 1.0) < 1e-6

    def test_scale_consensus_halves_score(self):
        mask = np.zeros((30, 30), dtype=bool)
        mask[4:24, 4:24] = True
        assert abs(geometric_score(mask, a_ref=800) - 0.5) < 1e-9

    def test_plus_pentomino_solidity_below_one(self):
        # plus shape from five 10x10 squares; its hull adds the corner wedges
        mask = np.zeros((40, 40), dtype=bool)
        mask[0:10, 10:20] = True
        mask[10:20, 0:30] = True
        mask[20:30, 10:20] = True
        (area, hull), = component_stats(mask)
        assert area == 500
        ys, xs = np.nonzero(mask)
        assert hull == hull_area_oracle(ys, xs)
        assert hull > area
        score = geometric_score(mask, a_ref=500)
        assert abs(score - area / hull) < 1e-9
        assert score < 1.0

    def test_empty_mask_scores_zero(self):
        assert geometric_score(np.zeros((5, 5), dtype=bool), a_ref=10) == 0.0

    def test_score_bounded(self):
        rng = np.random.default_rng(4)
        for _ in range(20):
            mask = refine_candidate(rng.random((20, 20)) > 0.55)
            assert 0.0 <= geometric_score(mask, a_ref=50.0) <= 1.0

    def test_translation_invariance(self):
        mask = np.zeros((40, 40), dtype=bool)
        mask[3:12, 3:12] = True
        mask[5, 20:26] = True  # second component, thin line
        mask = refine_candidate(mask, PriorConfig(min_component_fraction=0.01))
        assert len(component_stats(mask)) == 2
        shifted = np.roll(np.roll(mask, 9, axis=0), 7, axis=1)
        assert geometric_score(mask, 77.0) == geometric_score(shifted, 77.0)


class TestSelect:
    def test_recovers_plateau_blob(self):
        rng = np.random.default_rng(5)
        heat, support = plateau_blob_heatmap(rng, size=128, r_range=(16, 34))
        a_ref = float(np.count_nonzero(support))
        prior, cand = select_prior(heat, PriorConfig(), a_ref)
        assert mask_iou(prior, support) >= 0.8
        assert cand.score > 0.8

    def test_all_zero_heatmap_raises(self):
        with pytest.raises(AllCandidatesEmpty):
            select_prior(np.zeros((16, 16), dtype=np.float32), PriorConfig(), 10.0)

    def test_tie_goes_to_lower_tau(self):
        h = np.zeros((20, 20), dtype=np.float32)
        h[5:15, 5:15] = 0.9  # identical candidate at every threshold
        _, cand = select_prior(h, PriorConfig(), a_ref=100.0)
        assert abs(cand.tau - 0.4) < 1e-9

    def test_components_sorted_and_filtered(self):
        h = np.zeros((40, 60), dtype=np.float32)
        h[4:24, 4:24] = 0.95      # 400 px
        h[10:20, 40:50] = 0.95    # 100 px (25% of largest: kept)
        _, cand = select_prior(h, PriorConfig(), a_ref=500.0)
        areas = [a for a, _ in cand.components]
        assert areas == sorted(areas, reverse=True)
        assert areas[0] == 400 and areas[1] == 100
        assert all(a >= 0.2 * areas[0] for a in areas)


class TestReferenceArea:
    def test_support_ratio_projection(self):
        support = np.zeros((50, 20), dtype=bool)
        support[:10, :10] = True  # 100 / 1000 = 10%
        assert reference_area(support, 100, 100) == pytest.approx(1000.0)

    def test_full_foreground(self):
        assert reference_area(np.ones((5, 5), dtype=bool), 10, 10) == pytest.approx(100.0)

    def test_fixed_mode(self):
        cfg = PriorConfig(a_ref_mode="fixed", a_ref_fixed=500.0)
        assert reference_area(np.ones((2, 2), dtype=bool), 9, 9, cfg) == 500.0

    def test_fixed_mode_requires_value(self):
        with pytest.raises(MissingFixedValue):
            reference_area(np.ones((2, 2), dtype=bool), 9, 9, PriorConfig(a_ref_mode="fixed"))

    def test_empty_support_rejected(self):
        with pytest.raises(EmptyForeground):
            reference_area(np.zeros((4, 4), dtype=bool), 10, 10)


class TestConfig:
    def test_validation(self):
        with pytest.raises(ConfigError):
            PriorConfig(tau_min=0.5, tau_max=0.5)
        with pytest.raises(ConfigError):
            PriorConfig(stride=0.0)
        with pytest.raises(ConfigError):
            PriorConfig(min_component_fraction=0.0)
        with pytest.raises(ConfigError):
            PriorConfig(a_ref_mode="median")

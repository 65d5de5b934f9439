import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oneseg.errors import EmptyGroundTruth
from oneseg.metrics import (
    EvalRecord,
    aggregate,
    auc_pr,
    dice,
    iou,
    write_records_csv,
    write_summary_json,
)


def auc_pr_oracle(heatmap, gt):
    """Threshold-enumeration PR area, scalar loops only."""
    scores = [float(v) for v in np.asarray(heatmap).ravel()]
    labels = [bool(v) for v in np.asarray(gt).ravel()]
    n_pos = sum(labels)
    points = []
    for tau in sorted(set(scores), reverse=True):
        tp = fp = 0
        for s, l in zip(scores, labels):
            if s >= tau:
                if l:
                    tp += 1
                else:
                    fp += 1
        points.append((tp / n_pos, tp / (tp + fp)))
    area = 0.0
    prev_r, prev_p = 0.0, points[0][1]
    for r, p in points:
        area += (r - prev_r) * (p + prev_p) / 2.0
        prev_r, prev_p = r, p
    return area


def random_mask_pair(rng, shape=(12, 12)):
    return rng.random(shape) > 0.5, rng.random(shape) > 0.5


class TestOverlap:
    def test_identical_masks(self):
        m = np.random.default_rng(0).random((8, 8)) > 0.4
        assert iou(m, m) == 1.0
        assert dice(m, m) == 1.0

    def test_disjoint_masks(self):
        a = np.zeros((4, 4), dtype=bool)
        b = np.zeros((4, 4), dtype=bool)
        a[0, 0] = True
        b[3, 3] = True
        assert iou(a, b) == 0.0
        assert dice(a, b) == 0.0

    def test_hand_counted(self):
        a = np.zeros((3, 3), dtype=bool)
        b = np.zeros((3, 3), dtype=bool)
        a.ravel()[:4] = True            # |a| = 4
        b.ravel()[2:6] = True           # |b| = 4, inter = 2, union = 6
        assert iou(a, b) == pytest.approx(1 / 3)
        assert dice(a, b) == pytest.approx(0.5)

    def test_both_empty_convention(self):
        e = np.zeros((3, 3), dtype=bool)
        assert iou(e, e) == 1.0
        assert dice(e, e) == 1.0

    def test_dim_mismatch(self):
        with pytest.raises(ValueError):
            iou(np.zeros((2, 2), bool), np.zeros((3, 3), bool))

    @given(st.integers(0, 2**30 - 1), st.integers(0, 2**30 - 1))
    @settings(max_examples=60, deadline=None)
    def test_dice_iou_identity(self, seed_a, seed_b):
        rng = np.random.default_rng([seed_a, seed_b])
        a, b = random_mask_pair(rng)
        j = iou(a, b)
        assert abs(dice(a, b) - 2 * j / (1 + j)) < 1e-9
        assert j <= dice(a, b) + 1e-12

    def test_symmetry(self):
        rng = np.random.default_rng(1)
        for _ in range(10):
            a, b = random_mask_pair(rng)
            assert iou(a, b) == iou(b, a)
            assert dice(a, b) == dice(b, a)


class TestAucPr:
    def test_perfect_ranking(self):
        gt = np.zeros((6, 6), dtype=bool)
        gt[2:5, 1:4] = True
        assert auc_pr(gt.astype(np.float32), gt) == pytest.approx(1.0)

    def test_constant_heatmap_gives_prevalence(self):
        gt = np.zeros((5, 4), dtype=bool)
        gt[0, :3] = True
        heat = np.full((5, 4), 0.5, dtype=np.float32)
        assert auc_pr(heat, gt) == pytest.approx(3 / 20, abs=1e-12)

    def test_random_against_oracle(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            heat = rng.choice([0.1, 0.3, 0.5, 0.7, 0.9], size=(6, 6)).astype(np.float64)
            gt = rng.random((6, 6)) > 0.6
            if not gt.any():
                gt[0, 0] = True
            assert auc_pr(heat, gt) == pytest.approx(auc_pr_oracle(heat, gt), abs=1e-9)

    def test_empty_ground_truth(self):
        with pytest.raises(EmptyGroundTruth):
            auc_pr(np.ones((3, 3), dtype=np.float32), np.zeros((3, 3), dtype=bool))


class TestAggregate:
    def test_single_record(self):
        r = EvalRecord("a", iou=0.4, dice=0.5, auc_pr=0.9)
        assert aggregate([r]) == (0.4, 0.5, 0.9)

    def test_pair_mean(self):
        rs = [EvalRecord("a", 0.2, 0.2), EvalRecord("b", 0.8, 0.8)]
        m_iou, m_dice, m_auc = aggregate(rs)
        assert m_iou == pytest.approx(0.5) and m_dice == pytest.approx(0.5)
        assert m_auc is None

    def test_three_mixed(self):
        rs = [
            EvalRecord("a", 0.3, 0.4, 0.9),
            EvalRecord("b", 0.6, 0.7, None),
            EvalRecord("c", 0.9, 0.95, 0.7),
        ]
        m_iou, m_dice, m_auc = aggregate(rs)
        assert m_iou == pytest.approx(0.6)
        assert m_dice == pytest.approx((0.4 + 0.7 + 0.95) / 3)
        assert m_auc == pytest.approx(0.8)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            aggregate([])


class TestExports:
    def test_csv_and_json(self, tmp_path):
        rs = [EvalRecord("q1", 0.5, 2 / 3, 0.8), EvalRecord("q2", 1.0, 1.0, None)]
        csv_path = tmp_path / "results.csv"
        json_path = tmp_path / "summary.json"
        write_records_csv(csv_path, rs)
        summary = write_summary_json(json_path, rs)
        lines = csv_path.read_text().strip().splitlines()
        assert lines[0] == "image_id,iou,dice,auc_pr"
        assert lines[1].startswith("q1,0.500000,0.666667,0.800000")
        on_disk = json.loads(json_path.read_text())
        assert on_disk["m_iou"] == summary["m_iou"] == 0.75
        assert on_disk["num_images"] == 2

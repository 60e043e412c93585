"""Evaluation tests: AP oracle equivalence, threshold counting, invariances."""

from dataclasses import dataclass

import numpy as np
import pytest

from dynanchor.evaluation import (
    COCO_IOU_THRESHOLDS,
    average_precision,
    format_table,
    mmap,
    EvalResult,
)
from dynanchor.matching import GroundTruthBox


@dataclass
class Det:
    box: tuple  # corner form (x1, y1, x2, y2)
    score: float
    class_id: int = 0


def corner_iou(a, b):
    """Loop-free-of-library corner IoU for the oracle."""
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    area_a = (a[2] - a[0]) * (a[3] - a[1])
    area_b = (b[2] - b[0]) * (b[3] - b[1])
    return inter / (area_a + area_b - inter)


def gt_corners(g):
    return (g.cx - g.w / 2, g.cy - g.h / 2, g.cx + g.w / 2, g.cy + g.h / 2)


def reference_ap(dets_by_image, gts_by_image, thresh):
    """Brute-force AP: explicit greedy matching and 101-point scan."""
    n_gts = sum(len(g) for g in gts_by_image)
    if n_gts == 0:
        return None
    flat = []
    for img, dets in enumerate(dets_by_image):
        for d in dets:
            flat.append((img, d))
    flat.sort(key=lambda p: (-p[1].score, p[0], p[1].box[0], p[1].box[1],
                             p[1].box[2], p[1].box[3]))
    used = [set() for _ in gts_by_image]
    points = []
    tp = 0
    for k, (img, d) in enumerate(flat):
        best_iou, best_j = -1.0, -1
        for j, g in enumerate(gts_by_image[img]):
            if j in used[img]:
                continue
            i = corner_iou(d.box, gt_corners(g))
            if i > best_iou:
                best_iou, best_j = i, j
        if best_j >= 0 and best_iou >= thresh:
            used[img].add(best_j)
            tp += 1
        points.append((tp / n_gts, tp / (k + 1)))
    total = 0.0
    for r in np.linspace(0, 1, 101):
        best = 0.0
        for rec, prec in points:
            if rec >= r and prec > best:
                best = prec
        total += best
    return total / 101.0


GT = GroundTruthBox


class TestAveragePrecision:
    def test_single_perfect_detection(self):
        dets = [[Det((0, 0, 10, 10.5), 0.9)]]
        gts = [[GT(5, 5, 10, 10, 0)]]
        assert average_precision(dets, gts, 0.5) == pytest.approx(1.0)

    def test_no_detections(self):
        assert average_precision([[]], [[GT(5, 5, 10, 10, 0)]], 0.5) == 0.0

    def test_no_gts_is_undefined(self):
        assert average_precision([[Det((0, 0, 1, 1), 0.5)]], [[]], 0.5) is None

    def test_mixed_case_matches_reference(self):
        dets = [[
            Det((0, 0, 10, 10), 0.9),    # good match of gt 0
            Det((0, 0, 9, 11), 0.8),     # duplicate on gt 0
            Det((30, 30, 42, 38), 0.85), # decent match of gt 1
        ]]
        gts = [[GT(5, 5, 10, 10, 0), GT(36, 34, 12, 8, 0)]]
        for t in (0.5, 0.75):
            got = average_precision(dets, gts, t)
            assert got == pytest.approx(reference_ap(dets, gts, t), abs=1e-9)

    def test_random_cases_match_reference(self):
        rng = np.random.default_rng(0)
        for _ in range(40):
            n_img = int(rng.integers(1, 3))
            dets, gts = [], []
            for _ in range(n_img):
                img_gts = [GT(*rng.uniform(10, 50, 2), *rng.uniform(5, 25, 2), 0)
                           for _ in range(rng.integers(0, 4))]
                img_dets = []
                for _ in range(rng.integers(0, 6)):
                    c = rng.uniform(5, 55, 2)
                    s = rng.uniform(4, 26, 2)
                    img_dets.append(Det((c[0] - s[0] / 2, c[1] - s[1] / 2,
                                         c[0] + s[0] / 2, c[1] + s[1] / 2),
                                        float(rng.uniform(0.05, 1.0))))
                dets.append(img_dets)
                gts.append(img_gts)
            if sum(len(g) for g in gts) == 0:
                continue
            for t in (0.5, 0.7, 0.9):
                got = average_precision(dets, gts, t)
                assert got == pytest.approx(reference_ap(dets, gts, t), abs=1e-9)

    def test_score_promotion_raises_ap(self):
        # a true positive outscoring a false positive can only help
        gts = [[GT(5, 5, 10, 10, 0)]]
        fp = Det((40, 40, 50, 50), 0.8)
        tp_low = Det((0, 0, 10, 10), 0.6)
        tp_high = Det((0, 0, 10, 10), 0.9)
        low = average_precision([[fp, tp_low]], gts, 0.5)
        high = average_precision([[fp, tp_high]], gts, 0.5)
        assert high >= low

    def test_order_invariance(self):
        rng = np.random.default_rng(1)
        dets = [[Det((i, 0, i + 10, 10), float(s))
                 for i, s in enumerate(rng.uniform(0.1, 1, 6))]]
        gts = [[GT(7, 5, 10, 10, 0), GT(12, 5, 8, 10, 0)]]
        base = average_precision(dets, gts, 0.5)
        for _ in range(5):
            shuffled = [list(rng.permutation(dets[0]))]
            assert average_precision(shuffled, gts, 0.5) == pytest.approx(base)


class TestMmap:
    def test_perfect_detector(self):
        gts = [[GT(5, 5, 10, 10, 0), GT(30, 30, 8, 12, 1)],
               [GT(15, 15, 6, 6, 2)]]
        dets = [
            [Det(tuple(gt_corners(g)), 0.95, g.class_id) for g in gts[0]],
            [Det(tuple(gt_corners(g)), 0.95, g.class_id) for g in gts[1]],
        ]
        result = mmap(dets, gts)
        assert result.mmAP == pytest.approx(1.0)
        assert result.ap50 == pytest.approx(1.0)
        assert result.ap75 == pytest.approx(1.0)

    def test_iou_point_six_threshold_counting(self):
        # every detection overlaps its gt at exactly IoU 0.6:
        # AP=1 for thresholds 0.50/0.55/0.60, 0 beyond -> mmAP = 3/10
        gts = [[GT(5, 5, 10, 10, 0)]]
        dets = [[Det((0, 0, 6, 10), 0.9, 0)]]  # inter 60, union 100
        result = mmap(dets, gts)
        assert result.ap50 == pytest.approx(1.0)
        assert result.ap75 == pytest.approx(0.0)
        assert result.mmAP == pytest.approx(0.3)

    def test_single_class_mean(self):
        gts = [[GT(5, 5, 10, 10, 0)]]
        dets = [[Det((0, 0, 10, 10), 0.9, 0)]]
        result = mmap(dets, gts)
        expect = np.mean([result.per_class[0][t] for t in COCO_IOU_THRESHOLDS])
        assert result.mmAP == pytest.approx(float(expect))

    def test_nested_thresholds_monotone(self):
        rng = np.random.default_rng(2)
        gts, dets = [], []
        for _ in range(4):
            img_gts = [GT(*rng.uniform(10, 60, 2), *rng.uniform(6, 20, 2), 0)
                       for _ in range(3)]
            img_dets = []
            for g in img_gts:
                jitter = rng.normal(0, 2, 4)
                c = gt_corners(g)
                img_dets.append(Det((c[0] + jitter[0], c[1] + jitter[1],
                                     c[2] + jitter[2], c[3] + jitter[3]),
                                    float(rng.uniform(0.3, 1.0))))
            gts.append(img_gts)
            dets.append(img_dets)
        result = mmap(dets, gts)
        aps = [np.mean([result.per_class[0][t]]) for t in COCO_IOU_THRESHOLDS]
        for lo, hi in zip(aps, aps[1:]):
            assert hi <= lo + 1e-12

    def test_class_without_gts_excluded(self):
        gts = [[GT(5, 5, 10, 10, 0)]]
        dets = [[Det((0, 0, 10, 10), 0.9, 0), Det((20, 20, 30, 30), 0.9, 7)]]
        result = mmap(dets, gts)
        assert set(result.per_class) == {0}

    def test_max_dets_cap(self):
        gts = [[GT(5, 5, 10, 10, 0)]]
        dets = [[Det((40, 40, 50, 50), 0.9, 0), Det((0, 0, 10, 10), 0.5, 0)]]
        capped = mmap(dets, gts, max_dets=1)
        assert capped.num_dets == 1
        assert capped.ap50 == 0.0  # only the high-scoring false positive kept

    def test_empty_dataset_rejected(self):
        with pytest.raises(ValueError):
            mmap([], [])
        with pytest.raises(ValueError, match="ground truths"):
            mmap([[]], [[]])

    def test_json_round_trip(self):
        gts = [[GT(5, 5, 10, 10, 0)]]
        dets = [[Det((0, 0, 10, 10), 0.9, 0)]]
        result = mmap(dets, gts)
        back = EvalResult.from_dict(result.to_dict())
        assert back.mmAP == result.mmAP
        assert back.per_class[0][0.5] == result.per_class[0][0.5]

    def test_table_renders(self):
        gts = [[GT(5, 5, 10, 10, 0)]]
        dets = [[Det((0, 0, 10, 10), 0.9, 0)]]
        text = format_table(mmap(dets, gts), class_names=["rectangle"])
        assert "rectangle" in text
        assert "mmAP" in text
        lines = text.splitlines()
        assert len(lines) >= 3

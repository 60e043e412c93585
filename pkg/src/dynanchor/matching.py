"""Anchor-to-ground-truth matching, box regression codec, loss drop mask.

Boxes are center-size (cx, cy, w, h) internally; corner form is accepted at
ingestion and converted once.  Vectorized numpy paths carry the work; the
scalar entry points define the contracts the tests pin down.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

__all__ = [
    "GroundTruthBox",
    "MatchThresholds",
    "TargetMap",
    "LABEL_NEGATIVE",
    "LABEL_IGNORED",
    "box_from_corners",
    "box_to_corners",
    "iou",
    "iou_matrix",
    "assign_targets",
    "encode_reg",
    "decode_reg",
    "decode_reg_many",
    "drop_mask",
    "REG_LOG_CLAMP",
]

LABEL_NEGATIVE = -1
LABEL_IGNORED = -2

# tw/th clamp: prevents overflow when decoding early-training garbage
REG_LOG_CLAMP = math.log(1000.0)


@dataclass(frozen=True)
class GroundTruthBox:
    """Center-size pixel box with a class label."""

    cx: float
    cy: float
    w: float
    h: float
    class_id: int

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise ValueError(f"ground truth box must have positive size, "
                             f"got w={self.w}, h={self.h}")
        if self.class_id < 0:
            raise ValueError(f"class id must be non-negative, got {self.class_id}")

    def as_array(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.w, self.h])


@dataclass(frozen=True)
class MatchThresholds:
    """IoU limits: >= t_pos is positive, < t_neg is negative, else ignored."""

    t_pos: float = 0.5
    t_neg: float = 0.4

    def __post_init__(self):
        if not (0.0 < self.t_pos <= 1.0):
            raise ValueError(f"t_pos must be in (0,1], got {self.t_pos}")
        if not (0.0 <= self.t_neg <= self.t_pos):
            raise ValueError(
                f"t_neg must be in [0, t_pos], got {self.t_neg} vs {self.t_pos}")


@dataclass
class TargetMap:
    """Per (level, anchor, cell) assignment result.

    labels[l] is [A, H, W]: a class id >= 0 for positives, LABEL_NEGATIVE or
    LABEL_IGNORED otherwise.  reg_targets[l] is [A, H, W, 4] and meaningful
    only where the label is positive.  matched_gt[l] holds the index of the
    matched ground truth (or -1) so callers can apply per-box loss masks.
    """

    labels: dict[int, np.ndarray] = field(default_factory=dict)
    reg_targets: dict[int, np.ndarray] = field(default_factory=dict)
    matched_gt: dict[int, np.ndarray] = field(default_factory=dict)

    def num_positive(self) -> int:
        return int(sum((lab >= 0).sum() for lab in self.labels.values()))

    def counts(self) -> tuple[int, int, int]:
        pos = self.num_positive()
        neg = int(sum((lab == LABEL_NEGATIVE).sum() for lab in self.labels.values()))
        ign = int(sum((lab == LABEL_IGNORED).sum() for lab in self.labels.values()))
        return pos, neg, ign


def box_from_corners(x1: float, y1: float, x2: float, y2: float) -> np.ndarray:
    if x2 <= x1 or y2 <= y1:
        raise ValueError(f"degenerate corner box ({x1},{y1},{x2},{y2})")
    return np.array([(x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1])


def box_to_corners(box: np.ndarray) -> np.ndarray:
    cx, cy, w, h = box
    return np.array([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2])


def iou(a, b) -> float:
    """Intersection over union of two center-size boxes."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a[2] <= 0 or a[3] <= 0 or b[2] <= 0 or b[3] <= 0:
        raise ValueError("iou: boxes must have positive area")
    ax1, ay1, ax2, ay2 = box_to_corners(a)
    bx1, by1, bx2, by2 = box_to_corners(b)
    iw = min(ax2, bx2) - max(ax1, bx1)
    ih = min(ay2, by2) - max(ay1, by1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = a[2] * a[3] + b[2] * b[3] - inter
    return float(inter / union)


def iou_matrix(anchors: np.ndarray, gts: np.ndarray) -> np.ndarray:
    """Pairwise IoU, [N, M] for [N, 4] anchors and [M, 4] ground truths."""
    if anchors.size == 0 or gts.size == 0:
        return np.zeros((anchors.shape[0], gts.shape[0]))
    ax1 = anchors[:, 0] - anchors[:, 2] / 2
    ay1 = anchors[:, 1] - anchors[:, 3] / 2
    ax2 = anchors[:, 0] + anchors[:, 2] / 2
    ay2 = anchors[:, 1] + anchors[:, 3] / 2
    gx1 = gts[:, 0] - gts[:, 2] / 2
    gy1 = gts[:, 1] - gts[:, 3] / 2
    gx2 = gts[:, 0] + gts[:, 2] / 2
    gy2 = gts[:, 1] + gts[:, 3] / 2
    iw = np.clip(np.minimum(ax2[:, None], gx2[None, :])
                 - np.maximum(ax1[:, None], gx1[None, :]), 0.0, None)
    ih = np.clip(np.minimum(ay2[:, None], gy2[None, :])
                 - np.maximum(ay1[:, None], gy1[None, :]), 0.0, None)
    inter = iw * ih
    areas_a = anchors[:, 2] * anchors[:, 3]
    areas_g = gts[:, 2] * gts[:, 3]
    return inter / (areas_a[:, None] + areas_g[None, :] - inter)


def encode_reg(anchor: np.ndarray, gt) -> np.ndarray:
    """(tx, ty, tw, th) offsets of a target box relative to an anchor box."""
    g = gt.as_array() if isinstance(gt, GroundTruthBox) else np.asarray(gt, dtype=np.float64)
    a = np.asarray(anchor, dtype=np.float64)
    if a[2] <= 0 or a[3] <= 0 or g[2] <= 0 or g[3] <= 0:
        raise ValueError("encode_reg: boxes must have positive size")
    return np.array([
        (g[0] - a[0]) / a[2],
        (g[1] - a[1]) / a[3],
        math.log(g[2] / a[2]),
        math.log(g[3] / a[3]),
    ])


def decode_reg(anchor: np.ndarray, deltas: np.ndarray) -> np.ndarray:
    """Inverse of encode_reg; tw/th are clamped at ln(1000) for safety."""
    d = np.asarray(deltas, dtype=np.float64)
    if not np.all(np.isfinite(d)):
        raise ValueError(f"decode_reg: non-finite deltas {d}")
    a = np.asarray(anchor, dtype=np.float64)
    tw = min(d[2], REG_LOG_CLAMP)
    th = min(d[3], REG_LOG_CLAMP)
    return np.array([
        a[0] + d[0] * a[2],
        a[1] + d[1] * a[3],
        a[2] * math.exp(tw),
        a[3] * math.exp(th),
    ])


def decode_reg_many(anchors: np.ndarray, deltas: np.ndarray) -> np.ndarray:
    """Vectorized decode_reg for [N, 4] anchors and deltas."""
    out = np.empty_like(deltas)
    out[:, 0] = anchors[:, 0] + deltas[:, 0] * anchors[:, 2]
    out[:, 1] = anchors[:, 1] + deltas[:, 1] * anchors[:, 3]
    out[:, 2] = anchors[:, 2] * np.exp(np.minimum(deltas[:, 2], REG_LOG_CLAMP))
    out[:, 3] = anchors[:, 3] * np.exp(np.minimum(deltas[:, 3], REG_LOG_CLAMP))
    return out


def assign_targets(anchors, gts: Sequence[GroundTruthBox], th: MatchThresholds,
                   force_match: bool = True) -> TargetMap:
    """Label every placed anchor positive/negative/ignored against the GTs.

    An anchor is positive to its max-IoU ground truth when that IoU reaches
    t_pos, negative below t_neg, ignored in between.  With force_match (the
    default) each ground truth's single best anchor is made positive even
    below t_pos, so no ground truth goes unsupervised; ties break toward the
    lowest flat anchor index.
    """
    level_boxes = anchors.boxes if hasattr(anchors, "boxes") else dict(anchors)
    if not level_boxes or all(b.size == 0 for b in level_boxes.values()):
        raise ValueError("assign_targets: empty anchor grid")

    levels = sorted(level_boxes)
    flat = np.concatenate([level_boxes[l].reshape(-1, 4) for l in levels], axis=0)
    n = flat.shape[0]
    labels_flat = np.full(n, LABEL_NEGATIVE, dtype=np.int64)
    matched_flat = np.full(n, -1, dtype=np.int64)
    reg_flat = np.zeros((n, 4))

    if gts:
        gt_arr = np.stack([g.as_array() for g in gts])
        classes = np.array([g.class_id for g in gts], dtype=np.int64)
        m = iou_matrix(flat, gt_arr)
        best_gt = m.argmax(axis=1)
        best_iou = m[np.arange(n), best_gt]

        labels_flat[best_iou >= th.t_pos] = classes[best_gt[best_iou >= th.t_pos]]
        between = (best_iou >= th.t_neg) & (best_iou < th.t_pos)
        labels_flat[between] = LABEL_IGNORED
        matched_flat[best_iou >= th.t_pos] = best_gt[best_iou >= th.t_pos]

        if force_match:
            forced = m.argmax(axis=0)  # best anchor per ground truth
            labels_flat[forced] = classes
            matched_flat[forced] = np.arange(len(gts))

        pos = labels_flat >= 0
        if pos.any():
            pa = flat[pos]
            pg = gt_arr[matched_flat[pos]]
            reg_flat[pos, 0] = (pg[:, 0] - pa[:, 0]) / pa[:, 2]
            reg_flat[pos, 1] = (pg[:, 1] - pa[:, 1]) / pa[:, 3]
            reg_flat[pos, 2] = np.log(pg[:, 2] / pa[:, 2])
            reg_flat[pos, 3] = np.log(pg[:, 3] / pa[:, 3])

    tmap = TargetMap()
    off = 0
    for l in levels:
        shape = level_boxes[l].shape[:3]
        count = shape[0] * shape[1] * shape[2]
        tmap.labels[l] = labels_flat[off:off + count].reshape(shape)
        tmap.matched_gt[l] = matched_flat[off:off + count].reshape(shape)
        tmap.reg_targets[l] = reg_flat[off:off + count].reshape(shape + (4,))
        off += count
    return tmap


def drop_mask(gt: GroundTruthBox, min_sqrt_hw: float = 50.0,
              max_sqrt_hw: float = 100.0, log_ratio_bound: float = 1.0) -> bool:
    """True when the box falls in the masked size/aspect band.

    A True result means this ground truth's loss contributions are zeroed
    during training (the box still participates in assignment so anchors
    matched to it are not treated as negatives).
    """
    s = math.sqrt(gt.h * gt.w)
    r = math.log(gt.w / gt.h)
    return (min_sqrt_hw < s < max_sqrt_hw) and (-log_ratio_bound < r < log_ratio_bound)

"""Average-precision evaluation over IoU thresholds 0.50:0.05:0.95.

Matching follows the usual protocol: detections of one class are sorted by
descending score (deterministic tie-break), each greedily claims the
unmatched ground truth with the highest IoU at or above the threshold, and
AP is the area under the precision envelope sampled at 101 recall points.
Classes without any ground truth are excluded from every mean.

Detections are duck-typed: anything with ``score``, ``class_id`` and a
corner-form ``box`` works.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .matching import GroundTruthBox, iou_matrix

__all__ = [
    "EvalResult",
    "COCO_IOU_THRESHOLDS",
    "average_precision",
    "mmap",
    "format_table",
]

COCO_IOU_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
_RECALL_POINTS = np.linspace(0.0, 1.0, 101)


def _corners_to_cs(corners: np.ndarray) -> np.ndarray:
    cs = np.empty_like(corners)
    cs[:, 0] = (corners[:, 0] + corners[:, 2]) / 2
    cs[:, 1] = (corners[:, 1] + corners[:, 3]) / 2
    cs[:, 2] = corners[:, 2] - corners[:, 0]
    cs[:, 3] = corners[:, 3] - corners[:, 1]
    return cs


@dataclass
class EvalResult:
    """Per-class AP at each IoU threshold plus the aggregate means."""

    per_class: dict[int, dict[float, float]]
    mmAP: float
    ap50: float
    ap75: float
    iou_thresholds: tuple[float, ...] = COCO_IOU_THRESHOLDS
    num_images: int = 0
    num_gts: int = 0
    num_dets: int = 0

    def to_dict(self) -> dict:
        return {
            "mmAP": self.mmAP,
            "AP50": self.ap50,
            "AP75": self.ap75,
            "iou_thresholds": list(self.iou_thresholds),
            "per_class": {
                str(c): {f"{t:.2f}": ap for t, ap in sorted(aps.items())}
                for c, aps in sorted(self.per_class.items())
            },
            "num_images": self.num_images,
            "num_gts": self.num_gts,
            "num_dets": self.num_dets,
        }

    def to_json(self, indent: int = 2) -> str:
        return json.dumps(self.to_dict(), indent=indent, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "EvalResult":
        per_class = {
            int(c): {float(t): ap for t, ap in aps.items()}
            for c, aps in d["per_class"].items()
        }
        return cls(per_class=per_class, mmAP=d["mmAP"], ap50=d["AP50"],
                   ap75=d["AP75"], iou_thresholds=tuple(d["iou_thresholds"]),
                   num_images=d.get("num_images", 0),
                   num_gts=d.get("num_gts", 0), num_dets=d.get("num_dets", 0))


def _sorted_detections(dets_by_image: Sequence[Sequence]) -> list[tuple[int, object]]:
    """Flatten to (image_idx, det), sorted by score desc with stable tie-break."""
    flat = [(i, d) for i, dets in enumerate(dets_by_image) for d in dets]
    flat.sort(key=lambda pair: (
        -pair[1].score, pair[0], pair[1].box[0], pair[1].box[1],
        pair[1].box[2], pair[1].box[3]))
    return flat


def average_precision(dets_by_image: Sequence[Sequence],
                      gts_by_image: Sequence[Sequence[GroundTruthBox]],
                      iou_thresh: float) -> float | None:
    """AP of one class; None when the class has no ground truths anywhere."""
    if len(dets_by_image) != len(gts_by_image):
        raise ValueError(
            f"detection/ground-truth image counts differ: "
            f"{len(dets_by_image)} vs {len(gts_by_image)}")
    n_gts = sum(len(g) for g in gts_by_image)
    if n_gts == 0:
        return None

    gt_arrays = [np.stack([g.as_array() for g in gts]) if gts else np.zeros((0, 4))
                 for gts in gts_by_image]
    gt_used = [np.zeros(len(gts), dtype=bool) for gts in gts_by_image]

    flat = _sorted_detections(dets_by_image)
    tp = np.zeros(len(flat))
    for k, (img, det) in enumerate(flat):
        gts = gt_arrays[img]
        if gts.shape[0] == 0:
            continue
        box_cs = _corners_to_cs(np.asarray(det.box, dtype=np.float64)[None, :])
        ious = iou_matrix(box_cs, gts)[0]
        ious[gt_used[img]] = -1.0
        j = int(np.argmax(ious))
        if ious[j] >= iou_thresh:
            gt_used[img][j] = True
            tp[k] = 1.0

    if len(flat) == 0:
        return 0.0
    cum_tp = np.cumsum(tp)
    recall = cum_tp / n_gts
    precision = cum_tp / np.arange(1, len(flat) + 1)
    # envelope: best precision at or beyond each recall level
    for i in range(len(precision) - 2, -1, -1):
        precision[i] = max(precision[i], precision[i + 1])
    idx = np.searchsorted(recall, _RECALL_POINTS, side="left")
    sampled = np.where(idx < len(precision), precision[np.minimum(idx, len(precision) - 1)], 0.0)
    return float(sampled.mean())


def mmap(dets_by_image: Sequence[Sequence],
         gts_by_image: Sequence[Sequence[GroundTruthBox]],
         iou_thresholds: Sequence[float] = COCO_IOU_THRESHOLDS,
         max_dets: int | None = None) -> EvalResult:
    """Full evaluation: AP per (class, IoU threshold) and the three means."""
    if len(dets_by_image) == 0:
        raise ValueError("mmap: empty dataset")
    if len(dets_by_image) != len(gts_by_image):
        raise ValueError("mmap: detection/ground-truth image counts differ")

    if max_dets is not None:
        dets_by_image = [
            sorted(dets, key=lambda d: -d.score)[:max_dets] for dets in dets_by_image]

    classes = sorted({g.class_id for gts in gts_by_image for g in gts})
    if not classes:
        raise ValueError("mmap: no ground truths in the dataset")

    per_class: dict[int, dict[float, float]] = {}
    for c in classes:
        c_dets = [[d for d in dets if d.class_id == c] for dets in dets_by_image]
        c_gts = [[g for g in gts if g.class_id == c] for gts in gts_by_image]
        per_class[c] = {}
        for t in iou_thresholds:
            ap = average_precision(c_dets, c_gts, t)
            per_class[c][t] = ap if ap is not None else 0.0

    def mean_at(t):
        return float(np.mean([per_class[c][t] for c in classes]))

    all_aps = [per_class[c][t] for c in classes for t in iou_thresholds]
    return EvalResult(
        per_class=per_class,
        mmAP=float(np.mean(all_aps)),
        ap50=mean_at(0.5) if 0.5 in iou_thresholds else float("nan"),
        ap75=mean_at(0.75) if 0.75 in iou_thresholds else float("nan"),
        iou_thresholds=tuple(iou_thresholds),
        num_images=len(gts_by_image),
        num_gts=sum(len(g) for g in gts_by_image),
        num_dets=sum(len(d) for d in dets_by_image),
    )


def format_table(result: EvalResult, class_names: Sequence[str] | None = None) -> str:
    """Aligned plain-text AP table, one row per class plus the means."""
    ths = result.iou_thresholds
    name_of = (lambda c: class_names[c] if class_names and c < len(class_names)
               else f"class {c}")
    rows = [["", *[f"AP@{t:.2f}" for t in ths], "mean"]]
    for c in sorted(result.per_class):
        aps = result.per_class[c]
        mean = np.mean([aps[t] for t in ths])
        rows.append([name_of(c), *[f"{aps[t]:.4f}" for t in ths], f"{mean:.4f}"])
    rows.append(["all (mmAP)", *[""] * len(ths), f"{result.mmAP:.4f}"])
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    lines = ["  ".join(cell.ljust(w) for cell, w in zip(r, widths)).rstrip()
             for r in rows]
    lines.append(f"AP50 = {result.ap50:.4f}   AP75 = {result.ap75:.4f}   "
                 f"({result.num_images} images, {result.num_gts} boxes, "
                 f"{result.num_dets} detections)")
    return "\n".join(lines)

"""Inference with customized anchors: prediction, NMS, greedy anchor search.

Any encoding list can drive a trained meta-mode model; each encoding decodes
to a pixel box per pyramid level (standard box doubling) and gets its own
generated head.  Raw predictions are per-anchor and pre-NMS so that adding
anchors only ever adds detections; suppression and scoring happen on top.

The greedy search visits a candidate pool in seeded random order and keeps a
candidate only when the evaluation score of the combined (jointly
suppressed) detections strictly improves, so the score trace never
decreases.  Per-candidate raw detections on the evaluation subset are cached
up front, which makes the whole search cost one model pass per image.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .anchors import AnchorEncoding, place_anchors
from .autodiff import Tensor
from .detector import DetectionModel
from .generator import DATA_DEPENDENT
from .evaluation import mmap
from .matching import GroundTruthBox, decode_reg_many, iou_matrix

__all__ = [
    "Detection",
    "SearchState",
    "SearchResult",
    "predict",
    "predict_per_anchor",
    "detect",
    "nms",
    "greedy_select",
    "greedy_search",
    "default_search_pool",
]


@dataclass(frozen=True)
class Detection:
    """A scored corner-form box tagged with the anchor that produced it."""

    box: tuple[float, float, float, float]  # (x1, y1, x2, y2)
    score: float
    class_id: int
    source_anchor: AnchorEncoding

    def __post_init__(self):
        if not all(math.isfinite(v) for v in self.box):
            raise ValueError(f"detection box must be finite, got {self.box}")
        if not (0.0 < self.score < 1.0):
            raise ValueError(f"detection score must be in (0,1), got {self.score}")


def _as_image_tensor(image) -> Tensor:
    return image if isinstance(image, Tensor) else Tensor(image)


def predict_per_anchor(model: DetectionModel, image,
                       anchors: Sequence[AnchorEncoding],
                       score_thresh: float = 0.05) -> list[list[Detection]]:
    """Raw detections grouped by anchor index; one batched pass per level."""
    if not anchors:
        raise ValueError("predict: empty anchor list")
    img = _as_image_tensor(image)
    a = len(anchors)
    c = model.config.num_classes
    enc_arr = np.array([[e.eh, e.ew] for e in anchors])
    per_anchor: list[list[Detection]] = [[] for _ in range(a)]

    with ad.no_grad():
        pyramid = model.pyramid(img)
        grid = place_anchors(anchors, model.standard,
                             model.grid_shapes(img.data.shape[1:]), model.strides())
        for l in sorted(pyramid.levels):
            towered = model.tower(pyramid.levels[l])
            if model.config.variant == DATA_DEPENDENT:
                cls_theta, reg_theta = model.bank_thetas(enc_arr, pyramid.levels[l])
            else:
                cls_theta, reg_theta = model.bank_thetas(enc_arr)
            out_cls, out_reg = model.head_outputs(towered, cls_theta, reg_theta)
            h, w = out_cls.data.shape[1:]
            probs = 1.0 / (1.0 + np.exp(-out_cls.data.reshape(a, c, h, w)))
            deltas = out_reg.data.reshape(a, 4, h, w)
            boxes = grid.boxes[l]  # [A, H, W, 4] center-size
            ai, ci, yi, xi = np.nonzero(probs > score_thresh)
            if ai.size == 0:
                continue
            decoded = decode_reg_many(boxes[ai, yi, xi],
                                      deltas[ai, :, yi, xi])
            x1 = decoded[:, 0] - decoded[:, 2] / 2
            y1 = decoded[:, 1] - decoded[:, 3] / 2
            x2 = decoded[:, 0] + decoded[:, 2] / 2
            y2 = decoded[:, 1] + decoded[:, 3] / 2
            for k in range(ai.size):
                per_anchor[ai[k]].append(Detection(
                    box=(float(x1[k]), float(y1[k]), float(x2[k]), float(y2[k])),
                    score=float(probs[ai[k], ci[k], yi[k], xi[k]]),
                    class_id=int(ci[k]),
                    source_anchor=anchors[ai[k]]))
    return per_anchor


def predict(model: DetectionModel, image, anchors: Sequence[AnchorEncoding],
            score_thresh: float = 0.05) -> list[Detection]:
    """All raw detections over the given anchors (pre-NMS), anchor-major order."""
    groups = predict_per_anchor(model, image, anchors, score_thresh)
    return [d for group in groups for d in group]


def nms(dets: Sequence[Detection], iou_thresh: float = 0.5,
        class_aware: bool = True) -> list[Detection]:
    """Greedy descending-score suppression; survivors overlap <= iou_thresh.

    Ties break by score desc, then x-min asc (then the remaining corners and
    class id, making the result order-independent).
    """
    if not dets:
        return []
    for d in dets:
        if not math.isfinite(d.score):
            raise ValueError("nms: non-finite score")
    order = sorted(dets, key=lambda d: (-d.score, d.box[0], d.box[1],
                                        d.box[2], d.box[3], d.class_id))
    boxes = np.array([d.box for d in order])
    cs = np.empty_like(boxes)
    cs[:, 0] = (boxes[:, 0] + boxes[:, 2]) / 2
    cs[:, 1] = (boxes[:, 1] + boxes[:, 3]) / 2
    cs[:, 2] = boxes[:, 2] - boxes[:, 0]
    cs[:, 3] = boxes[:, 3] - boxes[:, 1]
    classes = np.array([d.class_id for d in order])
    alive = np.ones(len(order), dtype=bool)
    kept: list[Detection] = []
    for i in range(len(order)):
        if not alive[i]:
            continue
        kept.append(order[i])
        rest = np.nonzero(alive)[0]
        rest = rest[rest > i]
        if rest.size == 0:
            continue
        ious = iou_matrix(cs[i:i + 1], cs[rest])[0]
        kill = ious > iou_thresh
        if class_aware:
            kill &= classes[rest] == classes[i]
        alive[rest[kill]] = False
    return kept


def detect(model: DetectionModel, image, anchors: Sequence[AnchorEncoding],
           score_thresh: float = 0.05, nms_iou: float = 0.5) -> list[Detection]:
    """predict + class-aware NMS."""
    return nms(predict(model, image, anchors, score_thresh), nms_iou)


# ---------------------------------------------------------------------------
# greedy anchor-configuration search
# ---------------------------------------------------------------------------

@dataclass
class SearchState:
    selected: list[AnchorEncoding]
    current_score: float
    candidates: list[int]  # remaining pool indices
    rng: np.random.Generator


@dataclass
class SearchResult:
    selected: list[AnchorEncoding]
    trace: list[float]  # score after each step, starting with the empty set
    score: float
    singleton_scores: list[float] | None = None


def greedy_select(candidates: Sequence, set_score: Callable[[Sequence[int]], float],
                  order: Sequence[int], budget: int | None = None
                  ) -> tuple[list[int], list[float]]:
    """Core acceptance loop over candidate indices.

    Visits `order`, keeping an index only when the score of the enlarged
    selection strictly improves.  Returns the accepted indices and the score
    trace (initial score first).
    """
    selected: list[int] = []
    score = set_score(selected)
    trace = [score]
    steps = len(order) if budget is None else min(budget, len(order))
    for idx in list(order)[:steps]:
        trial = selected + [idx]
        s = set_score(trial)
        if s > score:
            selected = trial
            score = s
        trace.append(score)
    return selected, trace


def greedy_search(model: DetectionModel, candidates: Sequence[AnchorEncoding],
                  eval_set: Sequence[tuple[object, list[GroundTruthBox]]],
                  metric: Callable | None = None, seed: int = 0,
                  steps: int | None = None, score_thresh: float = 0.05,
                  nms_iou: float = 0.5,
                  evaluate_singletons: bool = False) -> SearchResult:
    """Pick an anchor subset that maximizes the metric on the eval subset.

    metric(dets_by_image, gts_by_image) -> float; defaults to mmAP.  Raw
    per-candidate detections are cached once; each step only re-runs NMS and
    the metric on the union of the cached lists.
    """
    if not candidates:
        raise ValueError("greedy_search: empty candidate pool")
    if not len(eval_set):
        raise ValueError("greedy_search: empty evaluation set")
    gts_by_image = [gts for _, gts in eval_set]
    if not any(gts_by_image):
        raise ValueError("greedy_search: evaluation set has no annotations")
    if metric is None:
        metric = lambda dets, gts: mmap(dets, gts).mmAP

    # cache[i][k]: raw detections of candidate k on image i
    cache = [predict_per_anchor(model, image, candidates, score_thresh)
             for image, _ in eval_set]

    def set_score(indices: Sequence[int]) -> float:
        dets = [nms([d for k in indices for d in cache[i][k]], nms_iou)
                for i in range(len(eval_set))]
        return metric(dets, gts_by_image)

    rng = np.random.default_rng(seed)
    state = SearchState(selected=[], current_score=0.0,
                        candidates=list(range(len(candidates))), rng=rng)
    order = [int(i) for i in rng.permutation(len(candidates))]
    chosen, trace = greedy_select(candidates, set_score, order, budget=steps)
    state.selected = [candidates[i] for i in chosen]
    state.current_score = trace[-1]
    singles = [set_score([k]) for k in range(len(candidates))] \
        if evaluate_singletons else None
    return SearchResult(selected=state.selected, trace=trace,
                        score=state.current_score, singleton_scores=singles)


def default_search_pool(k_range: tuple[int, int] = (-1, 5)) -> list[AnchorEncoding]:
    """Scale x ratio candidate grid for the search.

    Scales are 2^(k/5) with integer k over the inclusive k_range (default
    -1..5, seven scales); ratios are {1/3, 3} plus {1/t, 1, t} for
    t = 1.1, 1.2, ..., 2.0.  Encodings are relative, so the pool is valid
    for any model: a (scale, ratio) pair maps to
    (ln s + ln(r)/2, ln s - ln(r)/2).
    """
    scales = [2.0 ** (k / 5.0) for k in range(k_range[0], k_range[1] + 1)]
    ratios = {1.0, 1.0 / 3.0, 3.0}
    for i in range(1, 11):
        t = 1.0 + i / 10.0
        ratios.add(t)
        ratios.add(1.0 / t)
    pool: list[AnchorEncoding] = []
    seen: set[tuple[float, float]] = set()
    for s in scales:
        for r in sorted(ratios):
            enc = AnchorEncoding(eh=math.log(s) + 0.5 * math.log(r),
                                 ew=math.log(s) - 0.5 * math.log(r))
            key = (round(enc.eh, 12), round(enc.ew, 12))
            if key not in seen:
                seen.add(key)
                pool.append(enc)
    return pool

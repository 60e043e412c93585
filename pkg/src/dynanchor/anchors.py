"""Anchor-box geometry: log-ratio encodings, configurations, level scaling.

An anchor box is a (height, width) prior in pixels.  Its encoding is the
2-vector (ln(ah/AH), ln(aw/AW)) relative to a per-level standard box; the
standard box doubles with each coarser pyramid level, so one encoding names
a family of pixel boxes, one per level.  Natural log throughout: any other
base only rescales the first projection matrix and is absorbed by learning,
and this choice makes the encode/decode round trip exact.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

__all__ = [
    "AnchorBox",
    "StandardBox",
    "AnchorEncoding",
    "AnchorConfiguration",
    "AnchorGrid",
    "build_configuration",
    "standard_box",
    "encode",
    "decode_encoding",
    "level_standard",
    "augment",
    "place_anchors",
]


@dataclass(frozen=True)
class AnchorBox:
    """Height/width prior in pixels."""

    ah: float
    aw: float

    def __post_init__(self):
        if not (self.ah > 0 and self.aw > 0):
            raise ValueError(f"anchor box must have positive size, got ({self.ah}, {self.aw})")


@dataclass(frozen=True)
class StandardBox:
    """Normalization size (AH, AW) attached to a pyramid level."""

    AH: float
    AW: float
    level: int = 0

    def __post_init__(self):
        if not (self.AH > 0 and self.AW > 0):
            raise ValueError(f"standard box must have positive size, got ({self.AH}, {self.AW})")


@dataclass(frozen=True)
class AnchorEncoding:
    """Log size ratios (eh, ew) relative to a standard box."""

    eh: float
    ew: float

    def __post_init__(self):
        if not (math.isfinite(self.eh) and math.isfinite(self.ew)):
            raise ValueError(f"encoding components must be finite, got ({self.eh}, {self.ew})")

    def as_array(self) -> np.ndarray:
        return np.array([self.eh, self.ew])


@dataclass(frozen=True)
class AnchorConfiguration:
    """A scale set x ratio set grid of anchor boxes plus its standard box.

    ``scales`` are the multipliers 2^(k/n), ``ratios`` are height/width
    aspect ratios, and ``base_size`` is the pixel size at the finest level.
    """

    scales: tuple[float, ...]
    ratios: tuple[float, ...]
    base_size: float
    standard: StandardBox

    def __post_init__(self):
        if not self.scales or not self.ratios:
            raise ValueError("configuration needs at least one scale and one ratio")
        if any(s2 <= s1 for s1, s2 in zip(self.scales, self.scales[1:])):
            raise ValueError("scales must be strictly increasing")
        if any(r2 <= r1 for r1, r2 in zip(self.ratios, self.ratios[1:])):
            raise ValueError("ratios must be strictly increasing")

    def boxes(self) -> list[AnchorBox]:
        """All (scale, ratio) anchor boxes, scales-major order."""
        return [
            AnchorBox(ah=self.base_size * s * math.sqrt(r),
                      aw=self.base_size * s / math.sqrt(r))
            for s in self.scales
            for r in self.ratios
        ]

    def encodings(self, standard: StandardBox | None = None) -> list[AnchorEncoding]:
        """Encodings of the configuration's boxes.

        Pass the training-time standard box when evaluating a model with a
        configuration other than the one it was trained with; the
        normalization must stay consistent with training.
        """
        std = standard if standard is not None else self.standard
        return [encode(b, std) for b in self.boxes()]


def build_configuration(n: int, ratios: Sequence[float], base_size: float = 32.0,
                        level: int = 0) -> AnchorConfiguration:
    """Scale set {2^(k/n) : k = 0..n-1} crossed with the given aspect ratios."""
    if n < 1:
        raise ValueError(f"scale count must be >= 1, got {n}")
    if any(r <= 0 for r in ratios):
        raise ValueError(f"ratios must be positive, got {tuple(ratios)}")
    if base_size <= 0:
        raise ValueError(f"base size must be positive, got {base_size}")
    scales = tuple(2.0 ** (k / n) for k in range(n))
    cfg_ratios = tuple(sorted(float(r) for r in ratios))
    boxes = [
        AnchorBox(ah=base_size * s * math.sqrt(r), aw=base_size * s / math.sqrt(r))
        for s in scales
        for r in cfg_ratios
    ]
    return AnchorConfiguration(
        scales=scales, ratios=cfg_ratios, base_size=float(base_size),
        standard=standard_box(boxes, level=level))


def standard_box(boxes: Sequence[AnchorBox], level: int = 0) -> StandardBox:
    """Arithmetic mean of the anchor box sizes."""
    if not boxes:
        raise ValueError("standard_box: empty box sequence")
    ah = sum(b.ah for b in boxes) / len(boxes)
    aw = sum(b.aw for b in boxes) / len(boxes)
    return StandardBox(AH=ah, AW=aw, level=level)


def encode(box: AnchorBox, standard: StandardBox) -> AnchorEncoding:
    return AnchorEncoding(eh=math.log(box.ah / standard.AH),
                          ew=math.log(box.aw / standard.AW))


def decode_encoding(enc: AnchorEncoding, standard: StandardBox) -> AnchorBox:
    return AnchorBox(ah=standard.AH * math.exp(enc.eh),
                     aw=standard.AW * math.exp(enc.ew))


def level_standard(base: StandardBox, l_target: int) -> StandardBox:
    """Standard box at a coarser level: size doubles per level step."""
    if l_target < base.level:
        raise ValueError(
            f"target level {l_target} below base level {base.level}")
    f = 2.0 ** (l_target - base.level)
    return StandardBox(AH=base.AH * f, AW=base.AW * f, level=l_target)


def augment(enc: AnchorEncoding, rng: np.random.Generator,
            delta: float = 0.5) -> AnchorEncoding:
    """Perturb each component by an independent uniform draw in [-delta, delta].

    Applied in encoded (log) space; draws come from the caller's generator so
    training remains seed-deterministic.
    """
    if delta < 0:
        raise ValueError(f"augment delta must be >= 0, got {delta}")
    d = rng.uniform(-delta, delta, size=2)
    return AnchorEncoding(eh=enc.eh + d[0], ew=enc.ew + d[1])


@dataclass
class AnchorGrid:
    """Anchor boxes placed at every feature-map cell of every level.

    ``boxes[l]`` is [A, H_l, W_l, 4] in center-size form (cx, cy, w, h);
    cell centers sit at stride*(i + 0.5).  Anchor index order follows the
    encoding list handed to `place_anchors`.
    """

    boxes: dict[int, np.ndarray]
    strides: dict[int, int]

    def num_anchors(self) -> int:
        first = next(iter(self.boxes.values()))
        return first.shape[0]

    def total_cells(self) -> int:
        return sum(a.shape[1] * a.shape[2] for a in self.boxes.values())

    def flat(self) -> np.ndarray:
        """All boxes as one [N, 4] array, levels ascending, then (a, y, x)."""
        return np.concatenate(
            [self.boxes[l].reshape(-1, 4) for l in sorted(self.boxes)], axis=0)


def place_anchors(encodings: Sequence[AnchorEncoding], standard: StandardBox,
                  grid_shapes: dict[int, tuple[int, int]],
                  strides: dict[int, int]) -> AnchorGrid:
    """Decode encodings at every level and tile them over the feature grids."""
    if not encodings:
        raise ValueError("place_anchors: empty encoding list")
    boxes: dict[int, np.ndarray] = {}
    for l, (h, w) in grid_shapes.items():
        std = level_standard(standard, l)
        sizes = np.array(
            [[std.AW * math.exp(e.ew), std.AH * math.exp(e.eh)] for e in encodings])
        s = strides[l]
        cx = (np.arange(w) + 0.5) * s
        cy = (np.arange(h) + 0.5) * s
        grid = np.empty((len(encodings), h, w, 4))
        grid[..., 0] = cx[None, None, :]
        grid[..., 1] = cy[None, :, None]
        grid[..., 2] = sizes[:, 0, None, None]
        grid[..., 3] = sizes[:, 1, None, None]
        boxes[l] = grid
    return AnchorGrid(boxes=boxes, strides=dict(strides))

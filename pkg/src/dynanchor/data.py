"""Synthetic shapes dataset: generation, loading, per-anchor overlay rendering.

Scenes are grayscale-noise backgrounds with filled rectangles, ellipses and
triangles at class-distinct intensities; every shape's bounding box is the
ground truth.  Box sizes draw log-uniformly over sqrt(h*w) and aspects
uniformly over ln(w/h), with rejection on placement so boxes stay fully
inside the image and pairwise object IoU stays below a cap (a perfect
detector can recover every box).

Files: binary PPM (P6) images, JSON-lines annotations (one image per line:
{"image": str, "boxes": [{"cx","cy","w","h","class"}]}), and a manifest JSON
listing the splits {train, val, search_subset}.  Everything derives from the
spec seed, with per-image sub-seeds, so outputs are byte-reproducible.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Sequence

import numpy as np

from .matching import GroundTruthBox, iou

__all__ = [
    "SceneSpec",
    "Annotation",
    "DatasetError",
    "SHAPE_CLASSES",
    "generate_dataset",
    "load_manifest",
    "load_dataset",
    "write_ppm",
    "read_ppm",
    "render_overlay",
]

SHAPE_CLASSES = ("rectangle", "ellipse", "triangle")
_CLASS_INTENSITY = {0: 230, 1: 160, 2: 95}
_CLASS_COLORS = ((255, 80, 80), (80, 255, 80), (110, 160, 255),
                 (255, 220, 70), (230, 110, 255))
_NOISE_MAX = 40


class DatasetError(ValueError):
    """Malformed dataset files or annotations out of contract."""


@dataclass
class SceneSpec:
    """Knobs for scene content and split sizes."""

    image_size: int = 256
    classes: tuple[str, ...] = SHAPE_CLASSES
    min_objects: int = 1
    max_objects: int = 3
    sqrt_hw_range: tuple[float, float] = (20.0, 160.0)
    log_aspect_bound: float = 1.0
    max_overlap_iou: float = 0.3
    seed: int = 0
    val_fraction: float = 0.25
    search_size: int = 50

    def __post_init__(self):
        if self.image_size < 16:
            raise ValueError("image_size must be at least 16")
        unknown = set(self.classes) - set(SHAPE_CLASSES)
        if unknown:
            raise ValueError(f"unknown shape classes {sorted(unknown)}; "
                             f"available: {SHAPE_CLASSES}")
        lo, hi = self.sqrt_hw_range
        if not (0 < lo < hi):
            raise ValueError(f"bad sqrt_hw_range {self.sqrt_hw_range}")
        if self.log_aspect_bound < 0:
            raise ValueError("log_aspect_bound must be >= 0")
        if not (0.0 <= self.val_fraction < 1.0):
            raise ValueError("val_fraction must be in [0,1)")

    @classmethod
    def from_file(cls, path) -> "SceneSpec":
        raw = json.loads(Path(path).read_text())
        if not isinstance(raw, dict):
            raise DatasetError(f"scene spec {path} must be a JSON object")
        known = set(cls.__dataclass_fields__)
        unknown = set(raw) - known
        if unknown:
            raise DatasetError(f"unknown scene spec keys {sorted(unknown)}")
        for key in ("classes", "sqrt_hw_range"):
            if key in raw:
                raw[key] = tuple(raw[key])
        return cls(**raw)


@dataclass
class Annotation:
    image: str  # path relative to the manifest directory
    boxes: list[GroundTruthBox] = field(default_factory=list)


# ---------------------------------------------------------------------------
# PPM io
# ---------------------------------------------------------------------------

def write_ppm(path, img: np.ndarray) -> None:
    """Write an [H, W, 3] uint8 array as binary PPM (P6)."""
    if img.ndim != 3 or img.shape[2] != 3 or img.dtype != np.uint8:
        raise ValueError(f"write_ppm needs [H,W,3] uint8, got "
                         f"{img.shape} {img.dtype}")
    h, w = img.shape[:2]
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(img.tobytes())


def read_ppm(path) -> np.ndarray:
    """Read a binary PPM (P6) into [H, W, 3] uint8."""
    blob = Path(path).read_bytes()
    # header: three whitespace-separated tokens after the magic, '#' comments
    if not blob.startswith(b"P6"):
        raise DatasetError(f"{path}: not a binary PPM (P6) file")
    pos = 2
    tokens = []
    while len(tokens) < 3:
        while pos < len(blob) and blob[pos:pos + 1].isspace():
            pos += 1
        if pos < len(blob) and blob[pos:pos + 1] == b"#":
            while pos < len(blob) and blob[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DatasetError(f"{path}: truncated PPM header")
        tokens.append(blob[start:pos])
    w, h, maxval = (int(t) for t in tokens)
    if maxval != 255:
        raise DatasetError(f"{path}: unsupported max value {maxval}")
    pos += 1  # single whitespace after maxval
    data = blob[pos:pos + w * h * 3]
    if len(data) != w * h * 3:
        raise DatasetError(f"{path}: pixel payload truncated")
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w, 3).copy()


# ---------------------------------------------------------------------------
# scene generation
# ---------------------------------------------------------------------------

def _sample_box(spec: SceneSpec, rng: np.random.Generator) -> tuple[float, float] | None:
    lo, hi = spec.sqrt_hw_range
    limit = spec.image_size - 2.0
    for _ in range(100):
        s = math.exp(rng.uniform(math.log(lo), math.log(hi)))
        r = rng.uniform(-spec.log_aspect_bound, spec.log_aspect_bound)
        w = s * math.exp(r / 2.0)
        h = s * math.exp(-r / 2.0)
        if w <= limit and h <= limit:
            return w, h
    return None


def _paint_shape(img: np.ndarray, shape: str, gt: GroundTruthBox,
                 intensity: int) -> None:
    size = img.shape[0]
    ys, xs = np.mgrid[0:size, 0:size]
    x1, y1 = gt.cx - gt.w / 2, gt.cy - gt.h / 2
    x2, y2 = gt.cx + gt.w / 2, gt.cy + gt.h / 2
    if shape == "rectangle":
        mask = (xs >= x1) & (xs <= x2) & (ys >= y1) & (ys <= y2)
    elif shape == "ellipse":
        mask = (((xs - gt.cx) / (gt.w / 2)) ** 2
                + ((ys - gt.cy) / (gt.h / 2)) ** 2) <= 1.0
    elif shape == "triangle":
        # apex top-center, base along the bottom edge of the box
        ax, ay = gt.cx, y1
        inside_y = (ys >= y1) & (ys <= y2)
        t = np.clip((ys - ay) / max(y2 - ay, 1e-9), 0.0, 1.0)
        half = t * gt.w / 2.0
        mask = inside_y & (np.abs(xs - ax) <= half)
    else:
        raise ValueError(f"unknown shape {shape!r}")
    img[mask] = intensity


def _render_scene(spec: SceneSpec, rng: np.random.Generator
                  ) -> tuple[np.ndarray, list[GroundTruthBox], list[str]]:
    size = spec.image_size
    img = rng.integers(0, _NOISE_MAX, size=(size, size), dtype=np.int64)
    boxes: list[GroundTruthBox] = []
    shapes: list[str] = []
    n = int(rng.integers(spec.min_objects, spec.max_objects + 1))
    for _ in range(n):
        class_id = int(rng.integers(0, len(spec.classes)))
        shape = spec.classes[class_id]
        sampled = _sample_box(spec, rng)
        if sampled is None:
            continue
        w, h = sampled
        placed = None
        for _ in range(100):
            cx = rng.uniform(w / 2 + 1, size - w / 2 - 1)
            cy = rng.uniform(h / 2 + 1, size - h / 2 - 1)
            cand = GroundTruthBox(cx, cy, w, h, class_id)
            if all(iou(cand.as_array(), b.as_array()) <= spec.max_overlap_iou
                   for b in boxes):
                placed = cand
                break
        if placed is None:
            continue
        intensity = _CLASS_INTENSITY[class_id] + int(rng.integers(-12, 13))
        _paint_shape(img, shape, placed, intensity)
        boxes.append(placed)
        shapes.append(shape)
    rgb = np.repeat(np.clip(img, 0, 255).astype(np.uint8)[:, :, None], 3, axis=2)
    return rgb, boxes, shapes


def generate_dataset(spec: SceneSpec, n_images: int, out_dir) -> Path:
    """Write images, JSON-lines annotations and the split manifest.

    Split layout: the last round(val_fraction*n) images are validation, the
    rest train; the search subset is the first min(search_size, n_train)
    training images.  Returns the manifest path.
    """
    if n_images < 1:
        raise ValueError("empty dataset requested")
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)

    records = []
    for i in range(n_images):
        rng = np.random.default_rng([spec.seed, i])
        img, boxes, _ = _render_scene(spec, rng)
        rel = f"images/im_{i:05d}.ppm"
        write_ppm(out / rel, img)
        records.append({
            "image": rel,
            "boxes": [{"cx": b.cx, "cy": b.cy, "w": b.w, "h": b.h,
                       "class": b.class_id} for b in boxes],
        })
    ann_path = out / "annotations.jsonl"
    with open(ann_path, "w") as f:
        for rec in records:
            f.write(json.dumps(rec) + "\n")

    n_val = int(round(spec.val_fraction * n_images))
    n_train = n_images - n_val
    manifest = {
        "format": "dynanchor-dataset-v1",
        "image_size": spec.image_size,
        "classes": list(spec.classes),
        "annotations": "annotations.jsonl",
        "scene_spec": asdict(spec),
        "splits": {
            "train": list(range(n_train)),
            "val": list(range(n_train, n_images)),
            "search_subset": list(range(min(spec.search_size, n_train))),
        },
    }
    manifest_path = out / "manifest.json"
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest_path


# ---------------------------------------------------------------------------
# loading
# ---------------------------------------------------------------------------

def load_manifest(path) -> tuple[dict, Path]:
    p = Path(path)
    if p.is_dir():
        p = p / "manifest.json"
    if not p.exists():
        raise DatasetError(f"manifest {p} not found")
    manifest = json.loads(p.read_text())
    if manifest.get("format") != "dynanchor-dataset-v1":
        raise DatasetError(f"{p}: unknown dataset format "
                           f"{manifest.get('format')!r}")
    return manifest, p.parent


def _parse_annotations(ann_path: Path, image_size: int,
                       num_classes: int) -> list[Annotation]:
    annotations = []
    with open(ann_path) as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
                boxes = [GroundTruthBox(b["cx"], b["cy"], b["w"], b["h"],
                                        int(b["class"]))
                         for b in rec["boxes"]]
                image = rec["image"]
            except (ValueError, KeyError, TypeError) as exc:
                raise DatasetError(
                    f"{ann_path}: line {lineno}: malformed record ({exc})") from exc
            for b in boxes:
                if (b.cx - b.w / 2 < 0 or b.cy - b.h / 2 < 0
                        or b.cx + b.w / 2 > image_size
                        or b.cy + b.h / 2 > image_size):
                    raise DatasetError(
                        f"{ann_path}: line {lineno}: box outside image "
                        f"bounds in {image}")
                if b.class_id >= num_classes:
                    raise DatasetError(
                        f"{ann_path}: line {lineno}: class id {b.class_id} "
                        f"outside palette in {image}")
            annotations.append(Annotation(image=image, boxes=boxes))
    return annotations


def load_dataset(path, split: str | None = None
                 ) -> list[tuple[np.ndarray, Annotation]]:
    """Load (image, annotation) pairs; images are [3,H,W] float64 in [0,1]."""
    manifest, root = load_manifest(path)
    annotations = _parse_annotations(root / manifest["annotations"],
                                     manifest["image_size"],
                                     len(manifest["classes"]))
    if split is None:
        indices = range(len(annotations))
    else:
        if split not in manifest["splits"]:
            raise DatasetError(f"unknown split {split!r}; available: "
                               f"{sorted(manifest['splits'])}")
        indices = manifest["splits"][split]
    out = []
    for i in indices:
        ann = annotations[i]
        img = read_ppm(root / ann.image).astype(np.float64) / 255.0
        out.append((img.transpose(2, 0, 1), ann))
    return out


# ---------------------------------------------------------------------------
# overlay rendering
# ---------------------------------------------------------------------------

_FONT_3X5 = {
    "0": ("111", "101", "101", "101", "111"),
    "1": ("010", "110", "010", "010", "111"),
    "2": ("111", "001", "111", "100", "111"),
    "3": ("111", "001", "111", "001", "111"),
    "4": ("101", "101", "111", "001", "001"),
    "5": ("111", "100", "111", "001", "111"),
    "6": ("111", "100", "111", "101", "111"),
    "7": ("111", "001", "010", "010", "010"),
    "8": ("111", "101", "111", "101", "111"),
    "9": ("111", "101", "111", "001", "111"),
    ".": ("000", "000", "000", "000", "010"),
}


def _draw_text(img: np.ndarray, x: int, y: int, text: str, color) -> None:
    h, w = img.shape[:2]
    for ch in text:
        glyph = _FONT_3X5.get(ch)
        if glyph is None:
            x += 4
            continue
        for gy, row in enumerate(glyph):
            for gx, bit in enumerate(row):
                if bit == "1" and 0 <= y + gy < h and 0 <= x + gx < w:
                    img[y + gy, x + gx] = color
        x += 4


def _draw_box(img: np.ndarray, box, color, score: float | None) -> None:
    h, w = img.shape[:2]
    x1 = int(np.clip(round(box[0]), 0, w - 1))
    y1 = int(np.clip(round(box[1]), 0, h - 1))
    x2 = int(np.clip(round(box[2]), 0, w - 1))
    y2 = int(np.clip(round(box[3]), 0, h - 1))
    img[y1, x1:x2 + 1] = color
    img[y2, x1:x2 + 1] = color
    img[y1:y2 + 1, x1] = color
    img[y1:y2 + 1, x2] = color
    if score is not None:
        _draw_text(img, x1 + 2, y1 + 2, f"{score:.2f}", color)


def _to_uint8_hwc(image: np.ndarray) -> np.ndarray:
    img = np.asarray(image)
    if img.ndim == 3 and img.shape[0] == 3 and img.dtype != np.uint8:
        img = (np.clip(img, 0.0, 1.0) * 255.0).round().astype(np.uint8)
        img = img.transpose(1, 2, 0)
    elif img.ndim == 3 and img.shape[2] == 3 and img.dtype == np.uint8:
        img = img.copy()
    else:
        raise ValueError(f"render_overlay: unsupported image array "
                         f"{img.shape} {img.dtype}")
    return np.ascontiguousarray(img)


def render_overlay(image: np.ndarray, detections: Sequence,
                   group_by_anchor: bool = False, out_path="overlay.ppm"
                   ) -> list[Path]:
    """Draw class-colored 1-px borders and score labels; write PPM file(s).

    With group_by_anchor, one file per distinct source anchor is written
    (suffix _aNN inserted before the extension), ordered by first
    appearance.  Zero detections produce an unmodified copy of the image.
    """
    base = _to_uint8_hwc(image)
    out_path = Path(out_path)
    written: list[Path] = []
    if group_by_anchor:
        groups: dict[object, list] = {}
        for d in detections:
            groups.setdefault(d.source_anchor, []).append(d)
        if not groups:
            groups = {None: []}
        for k, (anchor, group) in enumerate(groups.items()):
            img = base.copy()
            for d in group:
                _draw_box(img, d.box, _CLASS_COLORS[d.class_id % len(_CLASS_COLORS)],
                          d.score)
            path = out_path.with_name(f"{out_path.stem}_a{k:02d}{out_path.suffix}")
            write_ppm(path, img)
            written.append(path)
        return written
    img = base.copy()
    for d in detections:
        _draw_box(img, d.box, _CLASS_COLORS[d.class_id % len(_CLASS_COLORS)], d.score)
    write_ppm(out_path, img)
    return [out_path]

"""Dataset tests: determinism, distribution fidelity, io round trips, overlays."""

import json
import math
from pathlib import Path

import numpy as np
import pytest
from scipy import stats

from dynanchor.anchors import AnchorEncoding
from dynanchor.data import (
    Annotation,
    DatasetError,
    SceneSpec,
    generate_dataset,
    load_dataset,
    read_ppm,
    render_overlay,
    write_ppm,
)
from dynanchor.inference import Detection
from dynanchor.matching import GroundTruthBox, iou

GOLDEN_DIR = Path(__file__).parent / "golden"


class TestPpmIo:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        img = rng.integers(0, 256, size=(7, 5, 3), dtype=np.uint8)
        path = tmp_path / "x.ppm"
        write_ppm(path, img)
        np.testing.assert_array_equal(read_ppm(path), img)

    def test_header_format(self, tmp_path):
        img = np.zeros((2, 3, 3), dtype=np.uint8)
        path = tmp_path / "x.ppm"
        write_ppm(path, img)
        assert path.read_bytes().startswith(b"P6\n3 2\n255\n")

    def test_comment_in_header(self, tmp_path):
        path = tmp_path / "c.ppm"
        path.write_bytes(b"P6\n# a comment\n2 1\n255\n" + bytes(6))
        assert read_ppm(path).shape == (1, 2, 3)

    def test_truncated_payload(self, tmp_path):
        path = tmp_path / "t.ppm"
        path.write_bytes(b"P6\n4 4\n255\n" + bytes(10))
        with pytest.raises(DatasetError, match="truncated"):
            read_ppm(path)


class TestGeneration:
    def test_single_image_single_record(self, tmp_path):
        spec = SceneSpec(image_size=64, sqrt_hw_range=(10, 30), seed=3,
                         min_objects=1, max_objects=1, val_fraction=0.0)
        manifest_path = generate_dataset(spec, 1, tmp_path)
        lines = (tmp_path / "annotations.jsonl").read_text().splitlines()
        assert len(lines) == 1
        rec = json.loads(lines[0])
        assert len(rec["boxes"]) == 1
        manifest = json.loads(manifest_path.read_text())
        assert manifest["splits"]["train"] == [0]

    def test_same_seed_byte_identical(self, tmp_path):
        spec = SceneSpec(image_size=64, sqrt_hw_range=(8, 30), seed=7)
        a, b = tmp_path / "a", tmp_path / "b"
        generate_dataset(spec, 5, a)
        generate_dataset(spec, 5, b)
        for rel in ["annotations.jsonl", "manifest.json",
                    *(f"images/im_{i:05d}.ppm" for i in range(5))]:
            assert (a / rel).read_bytes() == (b / rel).read_bytes(), rel

    def test_size_distribution_ks(self, tmp_path):
        # spec chosen so the box always fits: no size rejection to distort it
        spec = SceneSpec(image_size=256, sqrt_hw_range=(20, 120),
                         log_aspect_bound=0.6, seed=11, min_objects=2,
                         max_objects=3)
        generate_dataset(spec, 400, tmp_path / "d")
        sizes, aspects = [], []
        for _, ann in load_dataset(tmp_path / "d"):
            for b in ann.boxes:
                sizes.append(math.sqrt(b.h * b.w))
                aspects.append(math.log(b.w / b.h))
        assert len(sizes) > 500
        lo, hi = 20.0, 120.0

        def log_uniform_cdf(x):
            return np.clip((np.log(x) - np.log(lo)) / (np.log(hi) - np.log(lo)), 0, 1)

        assert stats.kstest(sizes, log_uniform_cdf).pvalue > 0.01
        assert stats.kstest(
            aspects, stats.uniform(loc=-0.6, scale=1.2).cdf).pvalue > 0.01

    def test_boxes_inside_image_and_recoverable(self, tmp_path):
        spec = SceneSpec(image_size=96, sqrt_hw_range=(10, 60), seed=5,
                         min_objects=2, max_objects=3)
        generate_dataset(spec, 30, tmp_path / "d")
        for _, ann in load_dataset(tmp_path / "d"):
            boxes = ann.boxes
            for b in boxes:
                assert b.cx - b.w / 2 >= 0 and b.cy - b.h / 2 >= 0
                assert b.cx + b.w / 2 <= 96 and b.cy + b.h / 2 <= 96
            for i in range(len(boxes)):
                for j in range(i + 1, len(boxes)):
                    assert iou(boxes[i].as_array(), boxes[j].as_array()) <= 0.3

    def test_empty_request_rejected(self, tmp_path):
        with pytest.raises(ValueError, match="empty"):
            generate_dataset(SceneSpec(image_size=64), 0, tmp_path)

    def test_spec_file_round_trip(self, tmp_path):
        path = tmp_path / "spec.json"
        path.write_text(json.dumps({"image_size": 96, "seed": 4,
                                    "sqrt_hw_range": [10, 60]}))
        spec = SceneSpec.from_file(path)
        assert spec.image_size == 96
        assert spec.sqrt_hw_range == (10, 60)

    def test_spec_file_unknown_key(self, tmp_path):
        path = tmp_path / "spec.json"
        path.write_text(json.dumps({"imagesize": 96}))
        with pytest.raises(DatasetError, match="unknown"):
            SceneSpec.from_file(path)


class TestLoading:
    def test_round_trip_preserves_boxes(self, tmp_path):
        spec = SceneSpec(image_size=64, sqrt_hw_range=(8, 30), seed=1)
        generate_dataset(spec, 4, tmp_path / "d")
        pairs = load_dataset(tmp_path / "d")
        raw = [json.loads(l) for l in
               (tmp_path / "d" / "annotations.jsonl").read_text().splitlines()]
        assert len(pairs) == 4
        for (img, ann), rec in zip(pairs, raw):
            assert img.shape == (3, 64, 64)
            assert img.dtype == np.float64
            assert img.max() <= 1.0
            assert len(ann.boxes) == len(rec["boxes"])
            for b, rb in zip(ann.boxes, rec["boxes"]):
                assert b.cx == rb["cx"] and b.w == rb["w"]

    def test_split_selection(self, tmp_path):
        spec = SceneSpec(image_size=64, sqrt_hw_range=(8, 30), seed=1,
                         val_fraction=0.25, search_size=2)
        generate_dataset(spec, 8, tmp_path / "d")
        assert len(load_dataset(tmp_path / "d", "train")) == 6
        assert len(load_dataset(tmp_path / "d", "val")) == 2
        assert len(load_dataset(tmp_path / "d", "search_subset")) == 2
        with pytest.raises(DatasetError, match="unknown split"):
            load_dataset(tmp_path / "d", "test")

    def test_truncated_json_line_names_line(self, tmp_path):
        spec = SceneSpec(image_size=64, sqrt_hw_range=(8, 30), seed=1)
        generate_dataset(spec, 2, tmp_path / "d")
        ann = tmp_path / "d" / "annotations.jsonl"
        lines = ann.read_text().splitlines()
        lines[1] = lines[1][:12]
        ann.write_text("\n".join(lines) + "\n")
        with pytest.raises(DatasetError, match="line 2"):
            load_dataset(tmp_path / "d")

    def test_out_of_bounds_box_rejected(self, tmp_path):
        spec = SceneSpec(image_size=64, sqrt_hw_range=(8, 30), seed=1)
        generate_dataset(spec, 1, tmp_path / "d")
        ann = tmp_path / "d" / "annotations.jsonl"
        rec = json.loads(ann.read_text())
        rec["boxes"] = [{"cx": 60, "cy": 32, "w": 20, "h": 10, "class": 0}]
        ann.write_text(json.dumps(rec) + "\n")
        with pytest.raises(DatasetError, match="bounds"):
            load_dataset(tmp_path / "d")

    def test_hand_written_fixture(self, tmp_path):
        # fixture authored directly, not via generate_dataset
        d = tmp_path / "d"
        (d / "images").mkdir(parents=True)
        write_ppm(d / "images" / "im_00000.ppm",
                  np.full((32, 32, 3), 7, dtype=np.uint8))
        (d / "annotations.jsonl").write_text(json.dumps({
            "image": "images/im_00000.ppm",
            "boxes": [{"cx": 16.0, "cy": 8.0, "w": 10.0, "h": 6.0, "class": 1},
                      {"cx": 20.0, "cy": 24.0, "w": 8.0, "h": 12.0, "class": 2}],
        }) + "\n")
        (d / "manifest.json").write_text(json.dumps({
            "format": "dynanchor-dataset-v1", "image_size": 32,
            "classes": ["rectangle", "ellipse", "triangle"],
            "annotations": "annotations.jsonl",
            "splits": {"train": [0], "val": [], "search_subset": [0]},
        }))
        pairs = load_dataset(d)
        assert len(pairs) == 1
        img, ann = pairs[0]
        assert img[0, 0, 0] == pytest.approx(7 / 255)
        assert ann.boxes[0] == GroundTruthBox(16.0, 8.0, 10.0, 6.0, 1)
        assert ann.boxes[1].class_id == 2


def _fixed_scene():
    """Deterministic arithmetic scene (no RNG): stable golden input."""
    img = np.zeros((3, 48, 48))
    ramp = np.linspace(0.05, 0.25, 48)
    img[:] = ramp[None, None, :]
    img[:, 10:20, 8:24] = 0.9
    img[:, 28:44, 30:42] = 0.55
    return img


def _fixed_detections():
    a1 = AnchorEncoding(0.0, 0.0)
    a2 = AnchorEncoding(0.3, -0.3)
    return [
        Detection((8.0, 10.0, 24.0, 20.0), 0.92, 0, a1),
        Detection((30.0, 28.0, 42.0, 44.0), 0.57, 1, a2),
        Detection((4.0, 30.0, 18.0, 45.0), 0.33, 2, a2),
    ]


class TestOverlay:
    def test_zero_detections_unmodified_copy(self, tmp_path):
        img = _fixed_scene()
        out = render_overlay(img, [], out_path=tmp_path / "o.ppm")
        got = read_ppm(out[0])
        expect = (np.clip(img, 0, 1) * 255).round().astype(np.uint8).transpose(1, 2, 0)
        np.testing.assert_array_equal(got, expect)

    def test_grouped_writes_one_file_per_anchor(self, tmp_path):
        out = render_overlay(_fixed_scene(), _fixed_detections(),
                             group_by_anchor=True, out_path=tmp_path / "p.ppm")
        assert [p.name for p in out] == ["p_a00.ppm", "p_a01.ppm"]
        for p in out:
            assert p.exists()

    def test_borders_and_labels_drawn(self, tmp_path):
        out = render_overlay(_fixed_scene(), _fixed_detections()[:1],
                             out_path=tmp_path / "o.ppm")
        img = read_ppm(out[0])
        # class 0 border color on the box top edge
        np.testing.assert_array_equal(img[10, 8], [255, 80, 80])
        np.testing.assert_array_equal(img[20, 24], [255, 80, 80])

    def test_golden_pixel_diff(self, tmp_path):
        golden = GOLDEN_DIR / "overlay_fixed_scene.ppm"
        out = render_overlay(_fixed_scene(), _fixed_detections(),
                             out_path=tmp_path / "o.ppm")
        assert out[0].read_bytes() == golden.read_bytes()

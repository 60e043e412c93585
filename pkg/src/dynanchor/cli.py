"""Command-line pipeline: gen-data, train, eval, search, render.

Every command is deterministic given its inputs and seed, echoes its
effective configuration into the output directory for provenance, and
writes a figure next to each delimited output (loss curve, AP summary,
search trace).  Exit codes: 0 success, 2 usage, 3 config validation,
4 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from .anchors import AnchorEncoding, build_configuration
from .config import ConfigError, ExperimentConfig, format_kv
from .data import (
    DatasetError,
    SceneSpec,
    generate_dataset,
    load_dataset,
    load_manifest,
    read_ppm,
    render_overlay,
)
from .detector import fit, init_model, load_model, save_model
from .evaluation import format_table, mmap
from .inference import default_search_pool, detect, greedy_search, nms, predict_per_anchor
from . import report

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_RUNTIME = 4


def _fail(message: str, code: int) -> int:
    print(f"error: {message}", file=sys.stderr)
    return code


def _echo_config(out_dir: Path, values: dict) -> None:
    (out_dir / "effective_config.txt").write_text(format_kv(values))


def _load_anchor_file(path, model) -> list[AnchorEncoding]:
    """Anchor list for inference: explicit encodings or a configuration.

    Configuration form ({n_scales, ratios, base_size}) is encoded against
    the checkpoint's training-time standard box, keeping the normalization
    consistent with training.
    """
    raw = json.loads(Path(path).read_text())
    if not isinstance(raw, dict):
        raise ValueError(f"anchor file {path} must be a JSON object")
    if "encodings" in raw:
        encs = [AnchorEncoding(float(e[0]), float(e[1])) for e in raw["encodings"]]
        if not encs:
            raise ValueError(f"anchor file {path} has an empty encoding list")
        return encs
    if {"n_scales", "ratios"} <= set(raw):
        cfg = build_configuration(int(raw["n_scales"]), raw["ratios"],
                                  float(raw.get("base_size", 32.0)))
        return cfg.encodings(model.standard)
    raise ValueError(
        f"anchor file {path} needs either 'encodings' or "
        f"'n_scales'/'ratios'/'base_size'")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_gen_data(spec_file, out_dir, n: int, seed: int | None = None) -> int:
    if n < 1:
        return _fail("empty dataset requested (need n >= 1)", EXIT_CONFIG)
    try:
        spec = SceneSpec.from_file(spec_file)
    except FileNotFoundError:
        return _fail(f"scene spec {spec_file} not found", EXIT_CONFIG)
    except (DatasetError, ValueError, TypeError) as exc:
        return _fail(f"invalid scene spec: {exc}", EXIT_CONFIG)
    if seed is not None:
        spec.seed = int(seed)
    out = Path(out_dir)
    try:
        manifest = generate_dataset(spec, n, out)
    except OSError as exc:
        return _fail(f"cannot write dataset: {exc}", EXIT_RUNTIME)
    echo = {f"scene.{k}": (list(v) if isinstance(v, tuple) else v)
            for k, v in vars(spec).items()}
    echo["scene.n_images"] = n
    _echo_config(out, echo)
    print(f"wrote {n} images and {manifest}")
    return EXIT_OK


def cmd_train(config_file, out_dir, seed: int | None = None,
              baseline: bool = False) -> int:
    try:
        cfg = ExperimentConfig.from_file(config_file)
        if seed is not None:
            cfg = cfg.with_value("train.seed", int(seed))
        if baseline:
            cfg = cfg.with_value("model.mode", "fixed")
        dataset_path = cfg.require_dataset()
    except ConfigError as exc:
        return _fail(str(exc), EXIT_CONFIG)

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    try:
        manifest, _ = load_manifest(dataset_path)
        train_pairs = load_dataset(dataset_path, "train")
    except DatasetError as exc:
        return _fail(str(exc), EXIT_RUNTIME)
    if not train_pairs:
        return _fail("train split is empty", EXIT_RUNTIME)

    classes = manifest["classes"]
    anchor_cfg = cfg.anchor_configuration()
    model = init_model(cfg.model_config(len(classes)), anchor_cfg.encodings(),
                       anchor_cfg.standard, seed=cfg["train.seed"],
                       class_names=list(classes))
    settings = cfg.train_settings()
    dataset = [(img, ann.boxes) for img, ann in train_pairs]
    try:
        log = fit(model, dataset, settings, steps=cfg["train.steps"],
                  batch_size=cfg["train.batch_size"], seed=cfg["train.seed"],
                  log_every=cfg["train.log_every"])
    except Exception as exc:  # non-finite loss, shape errors
        return _fail(f"training failed: {exc}", EXIT_RUNTIME)

    with open(out / "loss_log.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["step", "loss", "cls_loss", "reg_loss", "num_positive",
                    "num_dropped_gts"])
        for r in log:
            w.writerow([r.step, f"{r.loss:.8f}", f"{r.cls_loss:.8f}",
                        f"{r.reg_loss:.8f}", r.num_positive, r.num_dropped_gts])
    report.loss_curve_figure(log, out / "loss_curve.png")
    save_model(model, out / "checkpoint")
    _echo_config(out, cfg.values)
    print(f"trained {cfg['train.steps']} steps; "
          f"loss {log[0].loss:.4f} -> {log[-1].loss:.4f}; "
          f"checkpoint at {out / 'checkpoint.json'}")
    return EXIT_OK


def cmd_eval(checkpoint, dataset, anchors_file, out_dir, split: str = "val",
             score_thresh: float = 0.05, nms_iou: float = 0.5,
             max_dets: int | None = None) -> int:
    out = Path(out_dir)
    try:
        model = load_model(checkpoint)
    except FileNotFoundError as exc:
        return _fail(str(exc), EXIT_RUNTIME)
    try:
        pairs = load_dataset(dataset, split)
    except DatasetError as exc:
        return _fail(str(exc), EXIT_RUNTIME)
    if not pairs:
        return _fail(f"split {split!r} is empty", EXIT_RUNTIME)
    try:
        if anchors_file is None:
            encodings = model.train_encodings
        else:
            encodings = _load_anchor_file(anchors_file, model)
    except (ValueError, FileNotFoundError, json.JSONDecodeError) as exc:
        return _fail(f"bad anchor file: {exc}", EXIT_CONFIG)

    out.mkdir(parents=True, exist_ok=True)
    dets = [detect(model, img, encodings, score_thresh, nms_iou)
            for img, _ in pairs]
    result = mmap(dets, [ann.boxes for _, ann in pairs], max_dets=max_dets)
    (out / "eval.json").write_text(result.to_json() + "\n")
    (out / "eval.txt").write_text(
        format_table(result, model.class_names) + "\n")
    report.ap_summary_figure(result, out / "ap_summary.png", model.class_names)
    _echo_config(out, {
        "eval.anchors": [[e.eh, e.ew] for e in encodings],
        "eval.checkpoint": str(checkpoint),
        "eval.dataset": str(dataset),
        "eval.split": split,
        "eval.score_thresh": score_thresh,
        "eval.nms_iou": nms_iou,
        "eval.max_dets": max_dets,
    })
    print(format_table(result, model.class_names))
    return EXIT_OK


def cmd_search(checkpoint, dataset, out_dir, pool_file=None, seed: int = 0,
               split: str = "search_subset", max_images: int = 200,
               steps: int | None = None, score_thresh: float = 0.05,
               nms_iou: float = 0.5) -> int:
    out = Path(out_dir)
    try:
        model = load_model(checkpoint)
    except FileNotFoundError as exc:
        return _fail(str(exc), EXIT_RUNTIME)
    try:
        pairs = load_dataset(dataset, split)[:max_images]
    except DatasetError as exc:
        return _fail(str(exc), EXIT_RUNTIME)
    try:
        if pool_file is None:
            pool = default_search_pool()
        else:
            pool = _load_anchor_file(pool_file, model)
    except (ValueError, FileNotFoundError, json.JSONDecodeError) as exc:
        return _fail(f"bad pool file: {exc}", EXIT_CONFIG)

    eval_set = [(img, ann.boxes) for img, ann in pairs]
    try:
        result = greedy_search(model, pool, eval_set, seed=seed, steps=steps,
                               score_thresh=score_thresh, nms_iou=nms_iou,
                               evaluate_singletons=True)
    except ValueError as exc:
        return _fail(str(exc), EXIT_RUNTIME)

    out.mkdir(parents=True, exist_ok=True)
    best_single = max(result.singleton_scores)
    (out / "search.json").write_text(json.dumps({
        "encodings": [[e.eh, e.ew] for e in result.selected],
        "trace": result.trace,
        "score": result.score,
        "best_singleton_score": best_single,
        "pool_size": len(pool),
    }, indent=2, sort_keys=True) + "\n")
    report.search_trace_figure(result.trace, out / "search_trace.png",
                               singleton_best=best_single)
    _echo_config(out, {
        "search.checkpoint": str(checkpoint),
        "search.dataset": str(dataset),
        "search.split": split,
        "search.max_images": max_images,
        "search.seed": seed,
        "search.steps": steps,
        "search.pool_size": len(pool),
        "search.score_thresh": score_thresh,
        "search.nms_iou": nms_iou,
    })
    print(f"selected {len(result.selected)} of {len(pool)} anchors; "
          f"score {result.score:.4f} (best single {best_single:.4f}); "
          f"list at {out / 'search.json'}")
    return EXIT_OK


def cmd_render(checkpoint, image, anchors_file, out_dir,
               score_thresh: float = 0.3, nms_iou: float = 0.5) -> int:
    out = Path(out_dir)
    try:
        model = load_model(checkpoint)
    except FileNotFoundError as exc:
        return _fail(str(exc), EXIT_RUNTIME)
    try:
        img = read_ppm(image).astype(np.float64).transpose(2, 0, 1) / 255.0
    except (DatasetError, FileNotFoundError, OSError) as exc:
        return _fail(f"cannot read image: {exc}", EXIT_RUNTIME)
    try:
        encodings = _load_anchor_file(anchors_file, model)
    except (ValueError, FileNotFoundError, json.JSONDecodeError) as exc:
        return _fail(f"bad anchor file: {exc}", EXIT_CONFIG)

    out.mkdir(parents=True, exist_ok=True)
    groups = predict_per_anchor(model, img, encodings, score_thresh)
    kept = [d for group in groups for d in nms(group, nms_iou)]
    paths = render_overlay(img, kept, group_by_anchor=True,
                           out_path=out / "panel.ppm")
    summary = {
        "panels": [p.name for p in paths],
        "anchors": [[e.eh, e.ew] for e in encodings],
        "detections_per_anchor": [len(nms(g, nms_iou)) for g in groups],
        "score_thresh": score_thresh,
    }
    (out / "panels.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    _echo_config(out, {
        "render.checkpoint": str(checkpoint),
        "render.image": str(image),
        "render.score_thresh": score_thresh,
        "render.nms_iou": nms_iou,
        "render.anchors": [[e.eh, e.ew] for e in encodings],
    })
    print(f"wrote {len(paths)} panels to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dynanchor",
        description="anchor-customizable object detection pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic shapes dataset")
    p.add_argument("--spec", required=True, help="scene spec JSON file")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--n", type=int, required=True, help="number of images")
    p.add_argument("--seed", type=int, default=None, help="override spec seed")

    p = sub.add_parser("train", help="train a detector from a config file")
    p.add_argument("--config", required=True, help="key-value config file")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=None, help="override train.seed")
    p.add_argument("--baseline", action="store_true",
                   help="fixed-anchor baseline (model.mode = fixed)")

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--anchors", default=None,
                   help="anchor JSON (encodings or configuration); "
                        "defaults to the training anchors")
    p.add_argument("--out", required=True)
    p.add_argument("--split", default="val")
    p.add_argument("--score-thresh", type=float, default=0.05)
    p.add_argument("--nms-iou", type=float, default=0.5)
    p.add_argument("--max-dets", type=int, default=None)

    p = sub.add_parser("search", help="greedy anchor-configuration search")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--pool", default=None, help="candidate pool JSON; "
                                                "defaults to the built-in grid")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--split", default="search_subset")
    p.add_argument("--max-images", type=int, default=200)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--score-thresh", type=float, default=0.05)
    p.add_argument("--nms-iou", type=float, default=0.5)

    p = sub.add_parser("render", help="per-anchor detection overlay panels")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True, help="PPM image path")
    p.add_argument("--anchors", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--score-thresh", type=float, default=0.3)
    p.add_argument("--nms-iou", type=float, default=0.5)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "gen-data":
        return cmd_gen_data(args.spec, args.out, args.n, args.seed)
    if args.command == "train":
        return cmd_train(args.config, args.out, args.seed, args.baseline)
    if args.command == "eval":
        return cmd_eval(args.checkpoint, args.dataset, args.anchors, args.out,
                        split=args.split, score_thresh=args.score_thresh,
                        nms_iou=args.nms_iou, max_dets=args.max_dets)
    if args.command == "search":
        return cmd_search(args.checkpoint, args.dataset, args.out,
                          pool_file=args.pool, seed=args.seed,
                          split=args.split, max_images=args.max_images,
                          steps=args.steps, score_thresh=args.score_thresh,
                          nms_iou=args.nms_iou)
    if args.command == "render":
        return cmd_render(args.checkpoint, args.image, args.anchors, args.out,
                          score_thresh=args.score_thresh, nms_iou=args.nms_iou)
    return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())

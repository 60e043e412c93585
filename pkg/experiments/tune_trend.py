"""Scratch experiment: tune the desk-scale trend recipe (not shipped)."""
import sys, time, json
import numpy as np
from pathlib import Path

from dynanchor.anchors import build_configuration
from dynanchor.data import SceneSpec, generate_dataset, load_dataset
from dynanchor.detector import (ModelConfig, TrainSettings, DropSettings,
                                init_model, fit)
from dynanchor.evaluation import mmap
from dynanchor.inference import detect
from dynanchor.matching import MatchThresholds

OUT = Path("/tmp/trendtune")

def get_dataset(n=700, seed=424242):
    d = OUT / f"ds{seed}_{n}"
    if not (d / "manifest.json").exists():
        spec = SceneSpec(image_size=96, sqrt_hw_range=(10.0, 60.0),
                         log_aspect_bound=1.0, seed=seed, min_objects=1,
                         max_objects=3, val_fraction=200/700, search_size=50)
        t0 = time.perf_counter()
        generate_dataset(spec, n, d)
        print(f"dataset gen: {time.perf_counter()-t0:.1f}s")
    return d

def train_one(ds_dir, mode, seed, steps, lr, feat=16, hidden=16, drop=None, variant="data-independent"):
    cfg = ModelConfig(num_classes=3, feat_channels=feat, num_levels=3,
                      tower_depth=2, hidden=hidden, mode=mode, variant=variant)
    ac = build_configuration(5, [1/3, 0.5, 1.0, 2.0, 3.0], base_size=12)
    model = init_model(cfg, ac.encodings(), ac.standard, seed=seed)
    train = [(img, ann.boxes) for img, ann in load_dataset(ds_dir, "train")]
    settings = TrainSettings(lr=lr, momentum=0.9, augment_delta=0.5,
                             thresholds=MatchThresholds(0.5, 0.4), drop=drop)
    t0 = time.perf_counter()
    log = fit(model, train, settings, steps=steps, seed=seed, log_every=100)
    dt = time.perf_counter() - t0
    print(f"  {mode} seed={seed}: {dt:.0f}s  loss {log[0].loss:.4f} -> {log[-1].loss:.4f}")
    return model

def evaluate(model, ds_dir, anchors=None, split="val"):
    pairs = load_dataset(ds_dir, split)
    encs = anchors if anchors is not None else model.train_encodings
    t0 = time.perf_counter()
    dets = [detect(model, img, encs, 0.05, 0.5) for img, _ in pairs]
    gts = [ann.boxes for _, ann in pairs]
    r = mmap(dets, gts)
    print(f"    eval {split} {len(encs)} anchors: {time.perf_counter()-t0:.0f}s "
          f"mmAP={100*r.mmAP:.2f} AP50={100*r.ap50:.2f} AP75={100*r.ap75:.2f}")
    return r

if __name__ == "__main__":
    steps = int(sys.argv[1]) if len(sys.argv) > 1 else 2000
    lr = float(sys.argv[2]) if len(sys.argv) > 2 else 0.01
    ds = get_dataset()
    print(f"config: steps={steps} lr={lr}")
    meta = train_one(ds, "meta", seed=0, steps=steps, lr=lr)
    evaluate(meta, ds)
    base = train_one(ds, "fixed", seed=0, steps=steps, lr=lr)
    evaluate(base, ds)

"""All trend experiments at acceptance scale; verifies criteria 6-10 margins."""
import json, time
import numpy as np
from pathlib import Path

from dynanchor.anchors import build_configuration
from dynanchor.data import SceneSpec, generate_dataset, load_dataset
from dynanchor.detector import (ModelConfig, TrainSettings, DropSettings,
                                init_model, fit)
from dynanchor.evaluation import mmap
from dynanchor.inference import detect, greedy_search, default_search_pool
from dynanchor.matching import MatchThresholds

OUT = Path("/tmp/trendtune")
SEEDS = [0, 1, 2]
STEPS = 3000
LR = 0.01
BATCH = 2

def get_dataset():
    d = OUT / "accept_ds"
    if not (d / "manifest.json").exists():
        spec = SceneSpec(image_size=96, sqrt_hw_range=(10.0, 60.0),
                         log_aspect_bound=1.0, seed=20260810, min_objects=1,
                         max_objects=3, val_fraction=200/700, search_size=50)
        generate_dataset(spec, 700, d)
    return d

ANCHOR_CFG = build_configuration(5, [1/3, 0.5, 1.0, 2.0, 3.0], base_size=12)
# middle third of sqrt(hw) in log space for the (10, 60) range
import math
_lo, _hi = 10.0, 60.0
BAND = (math.exp(math.log(_lo) + (math.log(_hi) - math.log(_lo)) / 3),
        math.exp(math.log(_lo) + 2 * (math.log(_hi) - math.log(_lo)) / 3))

def train_one(ds, mode, seed, variant="data-independent", drop=False):
    cfg = ModelConfig(num_classes=3, feat_channels=16, num_levels=3,
                      tower_depth=2, hidden=16, mode=mode, variant=variant)
    model = init_model(cfg, ANCHOR_CFG.encodings(), ANCHOR_CFG.standard, seed=seed)
    train = [(img, ann.boxes) for img, ann in load_dataset(ds, "train")]
    s = TrainSettings(lr=LR, momentum=0.9,
                      augment_delta=0.5 if mode == "meta" else 0.0,
                      thresholds=MatchThresholds(0.5, 0.4),
                      drop=DropSettings(BAND[0], BAND[1], 1.0) if drop else None)
    t0 = time.time()
    log = fit(model, train, s, steps=STEPS, batch_size=BATCH, seed=seed,
              log_every=STEPS)
    print(f"  {mode}{'-dd' if variant!='data-independent' else ''}"
          f"{'-drop' if drop else ''} seed={seed}: {time.time()-t0:.0f}s "
          f"loss->{log[-1].loss:.3f}", flush=True)
    return model

def evaluate(model, ds, encodings=None, split="val"):
    pairs = load_dataset(ds, split)
    encs = encodings if encodings is not None else model.train_encodings
    dets = [detect(model, img, encs, 0.05, 0.5) for img, _ in pairs]
    return mmap(dets, [ann.boxes for _, ann in pairs])

def main():
    ds = get_dataset()
    results = {}
    t_start = time.time()
    models = {}
    for seed in SEEDS:
        for key, kw in [("meta", dict(mode="meta")),
                        ("fixed", dict(mode="fixed")),
                        ("meta_drop", dict(mode="meta", drop=True)),
                        ("fixed_drop", dict(mode="fixed", drop=True)),
                        ("dd", dict(mode="meta", variant="data-dependent"))]:
            models[(key, seed)] = train_one(ds, seed=seed, **kw)

    # criterion 6: meta vs fixed on val
    for key in ("meta", "fixed", "meta_drop", "fixed_drop", "dd"):
        scores = [100 * evaluate(models[(key, s)], ds).mmAP for s in SEEDS]
        results[key] = scores
        print(f"{key}: {[f'{v:.2f}' for v in scores]} mean={np.mean(scores):.2f}", flush=True)

    # criterion 7: 3x3 vs 9x9 inference anchors on the meta models
    c3 = build_configuration(3, [0.5, 1.0, 2.0], base_size=12)
    c9 = build_configuration(9, [1/5, 1/4, 1/3, 1/2, 1.0, 2, 3, 4, 5], base_size=12)
    e3 = c3.encodings(ANCHOR_CFG.standard)
    e9 = c9.encodings(ANCHOR_CFG.standard)
    r3 = [100 * evaluate(models[("meta", s)], ds, e3).mmAP for s in SEEDS]
    r9 = [100 * evaluate(models[("meta", s)], ds, e9).mmAP for s in SEEDS]
    results["infer_3x3"] = r3
    results["infer_9x9"] = r9
    print(f"3x3 inference: {[f'{v:.2f}' for v in r3]} mean={np.mean(r3):.2f}", flush=True)
    print(f"9x9 inference: {[f'{v:.2f}' for v in r9]} mean={np.mean(r9):.2f}", flush=True)

    # criterion 8: greedy search vs best singleton (seed 0 model)
    model = models[("meta", 0)]
    subset = [(img, ann.boxes) for img, ann in load_dataset(ds, "search_subset")]
    pool = default_search_pool()
    t0 = time.time()
    sr = greedy_search(model, pool, subset, seed=0, evaluate_singletons=True)
    print(f"search: {time.time()-t0:.0f}s final={100*sr.score:.2f} "
          f"best_singleton={100*max(sr.singleton_scores):.2f} "
          f"n_selected={len(sr.selected)} monotone={all(b>=a for a,b in zip(sr.trace, sr.trace[1:]))}", flush=True)
    results["search"] = {"final": sr.score, "best_singleton": max(sr.singleton_scores),
                         "n_selected": len(sr.selected)}

    # criteria summary
    m, b = np.mean(results["meta"]), np.mean(results["fixed"])
    print(f"\nC6 meta {m:.2f} vs fixed {b:.2f} (need meta >= fixed - 0.5): {'PASS' if m >= b - 0.5 else 'FAIL'}")
    print(f"C7 9x9 {np.mean(r9):.2f} vs 3x3 {np.mean(r3):.2f} (need >= -0.2): {'PASS' if np.mean(r9) >= np.mean(r3) - 0.2 else 'FAIL'}")
    deg_m = np.mean(results["meta"]) - np.mean(results["meta_drop"])
    deg_b = np.mean(results["fixed"]) - np.mean(results["fixed_drop"])
    print(f"C9 degradation meta {deg_m:.2f} vs fixed {deg_b:.2f} (need meta <= fixed + 0.3): {'PASS' if deg_m <= deg_b + 0.3 else 'FAIL'}")
    dd_m = np.mean(results["dd"])
    print(f"C10 dd {dd_m:.2f} vs di {m:.2f} (need within 1.0): {'PASS' if abs(dd_m - m) <= 1.0 else 'FAIL'}")
    print(f"\ntotal: {(time.time()-t_start)/60:.1f} min")
    (OUT / "full_trends.json").write_text(json.dumps(results, indent=2, default=float))

if __name__ == "__main__":
    main()

"""Desk-scale detector: pyramid backbone, shared head tower, per-anchor heads.

The backbone is a small conv/pool stack emitting L feature levels, the
finest at stride 4 and each next level half the resolution.  One tower of
3x3 conv+relu layers is shared across levels; per-anchor classification and
regression filters come either from the two generators ("meta" mode) or
from per-anchor learned tables ("fixed" mode, the comparison baseline).
Both modes share every other code path.

Training: each step takes the configured anchor encodings, perturbs them
(meta mode only), recomputes target assignment against the perturbed pixel
boxes, and optimizes a focal classification loss plus a smoothed-L1
regression loss end to end through the generators.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .anchors import (
    AnchorEncoding,
    StandardBox,
    augment,
    place_anchors,
)
from .autodiff import ParamStore, Tensor
from .generator import (
    DATA_DEPENDENT,
    DATA_INDEPENDENT,
    FilterBank,
    GeneratorParams,
    cls_block_dim,
    init_generator,
    generate_theta_many,
    reg_block_dim,
)
from .matching import (
    LABEL_IGNORED,
    GroundTruthBox,
    MatchThresholds,
    TargetMap,
    assign_targets,
)

__all__ = [
    "ModelConfig",
    "TrainSettings",
    "DropSettings",
    "FeaturePyramid",
    "HeadOutput",
    "DetectionModel",
    "StepStats",
    "FitLogRow",
    "fit",
    "BASE_STRIDE",
    "init_model",
    "backbone_forward",
    "head_forward",
    "focal_loss",
    "smooth_l1",
    "training_step",
    "save_model",
    "load_model",
]

BASE_STRIDE = 4  # finest level stride; the stem downsamples twice

MODE_META = "meta"
MODE_FIXED = "fixed"


@dataclass
class ModelConfig:
    num_classes: int
    feat_channels: int = 32
    num_levels: int = 3
    tower_depth: int = 2
    hidden: int = 128
    variant: str = DATA_INDEPENDENT
    mode: str = MODE_META
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    smooth_l1_beta: float = 1.0
    prior_prob: float = 0.01

    def __post_init__(self):
        if self.mode not in (MODE_META, MODE_FIXED):
            raise ValueError(f"unknown model mode {self.mode!r}")
        if self.variant not in (DATA_INDEPENDENT, DATA_DEPENDENT):
            raise ValueError(f"unknown generator variant {self.variant!r}")
        if self.num_levels < 1:
            raise ValueError("need at least one pyramid level")

    def stride(self, level: int) -> int:
        return BASE_STRIDE * (2 ** level)

    def min_divisor(self) -> int:
        return BASE_STRIDE * (2 ** (self.num_levels - 1))


@dataclass
class DropSettings:
    """Size/aspect band whose ground truths contribute zero loss."""

    min_sqrt_hw: float = 50.0
    max_sqrt_hw: float = 100.0
    log_ratio_bound: float = 1.0

    def drops(self, gt: GroundTruthBox) -> bool:
        s = math.sqrt(gt.h * gt.w)
        r = math.log(gt.w / gt.h)
        return (self.min_sqrt_hw < s < self.max_sqrt_hw
                and -self.log_ratio_bound < r < self.log_ratio_bound)


@dataclass
class TrainSettings:
    lr: float = 0.01
    momentum: float = 0.9
    augment_delta: float = 0.5
    thresholds: MatchThresholds = field(default_factory=MatchThresholds)
    force_match: bool = True
    drop: DropSettings | None = None


@dataclass
class FeaturePyramid:
    """Per-level feature maps; level l+1 has half the resolution of level l."""

    levels: dict[int, Tensor]


@dataclass
class HeadOutput:
    cls_logits: Tensor  # [C, H, W]
    reg_deltas: Tensor  # [4, H, W]
    anchor: AnchorEncoding | None = None
    level: int | None = None


@dataclass
class StepStats:
    loss: float
    cls_loss: float
    reg_loss: float
    num_positive: int
    num_dropped_gts: int


class DetectionModel:
    """Parameters plus the anchor bookkeeping needed to run the detector."""

    def __init__(self, config: ModelConfig, store: ParamStore,
                 train_encodings: list[AnchorEncoding], standard: StandardBox,
                 gen_cls: GeneratorParams | None = None,
                 gen_reg: GeneratorParams | None = None,
                 class_names: list[str] | None = None):
        self.config = config
        self.store = store
        self.train_encodings = list(train_encodings)
        self.standard = standard
        self.gen_cls = gen_cls
        self.gen_reg = gen_reg
        self.class_names = class_names

    # -- geometry -----------------------------------------------------------

    def grid_shapes(self, image_hw: tuple[int, int]) -> dict[int, tuple[int, int]]:
        h, w = image_hw
        div = self.config.min_divisor()
        if h % div or w % div:
            raise ad.ShapeError(
                f"image size ({h},{w}) not divisible by {div} "
                f"(stride of the coarsest of {self.config.num_levels} levels)")
        return {l: (h // self.config.stride(l), w // self.config.stride(l))
                for l in range(self.config.num_levels)}

    def strides(self) -> dict[int, int]:
        return {l: self.config.stride(l) for l in range(self.config.num_levels)}

    # -- forward pieces ------------------------------------------------------

    def pyramid(self, image: Tensor) -> FeaturePyramid:
        return backbone_forward(image, self.store, self.config)

    def tower(self, feature: Tensor) -> Tensor:
        out = feature
        for i in range(self.config.tower_depth):
            out = ad.relu(ad.conv2d_3x3(
                out, self.store[f"head.tower{i}.weight"],
                self.store[f"head.tower{i}.bias"]))
        return out

    def bank_thetas(self, encodings: np.ndarray,
                    feature: Tensor | None = None) -> tuple[Tensor, Tensor]:
        """Per-anchor flat parameter rows: ([A, D_cls], [A, D_reg]).

        Meta mode generates them from the encodings; fixed mode looks up the
        per-anchor tables and requires the training anchor set unchanged.
        """
        if self.config.mode == MODE_META:
            return (generate_theta_many(self.gen_cls, encodings, feature),
                    generate_theta_many(self.gen_reg, encodings, feature))
        base = np.array([[e.eh, e.ew] for e in self.train_encodings])
        if encodings.shape != base.shape or not np.allclose(encodings, base):
            raise ValueError(
                "fixed-anchor model can only run its predefined anchor set")
        a = len(self.train_encodings)
        cls = ad.stack_rows([self.store[f"fixed.a{k:03d}.cls_theta"] for k in range(a)])
        reg = ad.stack_rows([self.store[f"fixed.a{k:03d}.reg_theta"] for k in range(a)])
        return cls, reg

    def head_outputs(self, tower_feature: Tensor, cls_theta: Tensor,
                     reg_theta: Tensor) -> tuple[Tensor, Tensor]:
        """Batched per-anchor heads: ([A*C, H, W], [A*4, H, W])."""
        c = self.config.num_classes
        f = self.config.feat_channels
        a = cls_theta.data.shape[0]
        cls_w = ad.reshape(ad.slice_cols(cls_theta, 0, c * f * 9), (a * c, f, 3, 3))
        cls_b = ad.reshape(ad.slice_cols(cls_theta, c * f * 9, c * f * 9 + c), (a * c,))
        reg_w = ad.reshape(ad.slice_cols(reg_theta, 0, 4 * f * 9), (a * 4, f, 3, 3))
        reg_b = ad.reshape(ad.slice_cols(reg_theta, 4 * f * 9, 4 * f * 9 + 4), (a * 4,))
        return (ad.conv2d_3x3(tower_feature, cls_w, cls_b),
                ad.conv2d_3x3(tower_feature, reg_w, reg_b))

    def parameters(self) -> ParamStore:
        return self.store


def init_model(config: ModelConfig, train_encodings: Sequence[AnchorEncoding],
               standard: StandardBox, seed: int = 0,
               class_names: list[str] | None = None) -> DetectionModel:
    """Fresh model; conv weights draw uniform(+-1/sqrt(fan_in)), biases zero."""
    rng = np.random.default_rng([int(seed), 0x0D])
    store = ParamStore()
    f = config.feat_channels

    def conv_param(name, cout, cin):
        # Kaiming-uniform (relu gain): keeps activation variance stable
        # through the conv stack
        bound = math.sqrt(6.0 / (cin * 9))
        store.add(f"{name}.weight",
                  Tensor(rng.uniform(-bound, bound, size=(cout, cin, 3, 3)),
                         requires_grad=True))
        store.add(f"{name}.bias", Tensor(np.zeros(cout), requires_grad=True))

    conv_param("backbone.stem0", f, 3)
    conv_param("backbone.stem1", f, f)
    for l in range(1, config.num_levels):
        conv_param(f"backbone.level{l}", f, f)
    for i in range(config.tower_depth):
        conv_param(f"head.tower{i}", f, f)

    gen_cls = gen_reg = None
    if config.mode == MODE_META:
        gen_cls = init_generator("cls", config.num_classes, f, config.hidden, rng,
                                 variant=config.variant, prior_prob=config.prior_prob,
                                 store=store, prefix="gen.cls.")
        gen_reg = init_generator("reg", None, f, config.hidden, rng,
                                 variant=config.variant, prior_prob=config.prior_prob,
                                 store=store, prefix="gen.reg.")
    else:
        bias_value = -math.log((1.0 - config.prior_prob) / config.prior_prob)
        d_cls = cls_block_dim(config.num_classes, f)
        d_reg = reg_block_dim(f)
        for k in range(len(train_encodings)):
            theta = rng.uniform(-1, 1, size=d_cls) / math.sqrt(f * 9)
            theta[config.num_classes * f * 9:] = bias_value
            store.add(f"fixed.a{k:03d}.cls_theta", Tensor(theta, requires_grad=True))
            theta_r = rng.uniform(-1, 1, size=d_reg) / math.sqrt(f * 9)
            store.add(f"fixed.a{k:03d}.reg_theta", Tensor(theta_r, requires_grad=True))

    return DetectionModel(config, store, list(train_encodings), standard,
                          gen_cls, gen_reg, class_names)


def backbone_forward(image: Tensor, store: ParamStore,
                     config: ModelConfig) -> FeaturePyramid:
    """conv/pool stack: stride-4 stem, then one conv per coarser level."""
    if image.data.ndim != 3 or image.data.shape[0] != 3:
        raise ad.ShapeError(f"backbone expects a [3,H,W] image, got {image.data.shape}")
    h, w = image.data.shape[1:]
    div = config.min_divisor()
    if h % div or w % div:
        raise ad.ShapeError(
            f"image size ({h},{w}) not divisible by {div}")
    x = ad.avg_pool_2x2(ad.relu(ad.conv2d_3x3(
        image, store["backbone.stem0.weight"], store["backbone.stem0.bias"])))
    x = ad.avg_pool_2x2(ad.relu(ad.conv2d_3x3(
        x, store["backbone.stem1.weight"], store["backbone.stem1.bias"])))
    levels = {0: x}
    for l in range(1, config.num_levels):
        x = ad.relu(ad.conv2d_3x3(
            ad.avg_pool_2x2(x),
            store[f"backbone.level{l}.weight"], store[f"backbone.level{l}.bias"]))
        levels[l] = x
    return FeaturePyramid(levels=levels)


def head_forward(feature: Tensor, bank: FilterBank,
                 anchor: AnchorEncoding | None = None,
                 level: int | None = None) -> HeadOutput:
    """Apply one anchor's generated filters to a (tower-processed) feature."""
    if bank.feat_channels != feature.data.shape[0]:
        raise ad.ShapeError(
            f"head_forward: bank channels {bank.feat_channels} != "
            f"feature channels {feature.data.shape[0]}")
    return HeadOutput(
        cls_logits=ad.conv2d_3x3(feature, bank.cls_filters, bank.cls_bias),
        reg_deltas=ad.conv2d_3x3(feature, bank.reg_filters, bank.reg_bias),
        anchor=anchor, level=level)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def _focal_sum(logits: Tensor, wpos: np.ndarray, wneg: np.ndarray,
               gamma: float) -> Tensor:
    """Weighted focal sum: wpos carries alpha*1[y=1], wneg (1-alpha)*1[y=0]."""
    p = ad.sigmoid(logits)
    neg_log_p = ad.softplus(ad.neg(logits))     # -log sigmoid(z)
    neg_log_1mp = ad.softplus(logits)           # -log (1 - sigmoid(z))
    one_m_p = ad.add_scalar(ad.neg(p), 1.0)
    pos_term = ad.mul(ad.pow_const(one_m_p, gamma), neg_log_p)
    neg_term = ad.mul(ad.pow_const(p, gamma), neg_log_1mp)
    return ad.add(ad.weighted_sum(pos_term, wpos), ad.weighted_sum(neg_term, wneg))


def focal_loss(logits: Tensor, labels: np.ndarray, alpha: float = 0.25,
               gamma: float = 2.0, dropped: np.ndarray | None = None,
               normalizer: float | None = None) -> Tensor:
    """Mean focal term over the non-ignored anchors of one head output.

    logits is [C, H, W]; labels is [H, W] holding a class id for positives,
    -1 for negatives, -2 for ignored.  Entries of `dropped` mark positives
    whose matched ground truth is loss-masked; they contribute nothing and
    are excluded from the default normalizer.  Pass `normalizer` to share a
    global anchor count across levels and anchors.
    """
    c, h, w = logits.data.shape
    if labels.shape != (h, w):
        raise ad.ShapeError(f"focal_loss: labels shape {labels.shape} != ({h},{w})")
    counted = labels != LABEL_IGNORED
    if dropped is not None:
        counted &= ~(dropped & (labels >= 0))
    n = counted.sum() if normalizer is None else normalizer
    if n == 0:
        import warnings
        warnings.warn("focal_loss: no non-ignored anchors; loss defined as 0")
        return ad.scale(ad.sum_all(logits), 0.0)
    y = np.zeros((c, h, w))
    iy, ix = np.nonzero(labels >= 0)
    if dropped is not None and iy.size:
        keep = ~dropped[iy, ix]
        iy, ix = iy[keep], ix[keep]
    y[labels[iy, ix], iy, ix] = 1.0
    w_anchor = counted / float(n)
    wpos = alpha * y * w_anchor[None, :, :]
    wneg = (1.0 - alpha) * (1.0 - y) * w_anchor[None, :, :]
    return _focal_sum(logits, wpos, wneg, gamma)


def smooth_l1(pred: Tensor, target: np.ndarray, beta: float = 1.0) -> Tensor:
    """Summed elementwise huber between a prediction and its target vector."""
    t = np.asarray(target, dtype=np.float64)
    if pred.data.shape != t.shape:
        raise ad.ShapeError(f"smooth_l1: shapes {pred.data.shape} vs {t.shape}")
    return ad.sum_all(ad.huber(ad.sub(pred, Tensor(t)), beta))


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def _image_loss(model: DetectionModel, image: Tensor,
                gts: list[GroundTruthBox], encodings: list[AnchorEncoding],
                settings: TrainSettings) -> tuple[Tensor, Tensor, int, int]:
    """(cls_loss, reg_loss) graph tensors for one image, plus counters."""
    cfg = model.config
    c, f = cfg.num_classes, cfg.feat_channels
    a = len(encodings)
    enc_arr = np.array([[e.eh, e.ew] for e in encodings])

    pyramid = model.pyramid(image)
    towers = {l: model.tower(feat) for l, feat in pyramid.levels.items()}

    grid = place_anchors(encodings, model.standard,
                         model.grid_shapes(image.data.shape[1:]), model.strides())
    tmap = assign_targets(grid, gts, settings.thresholds,
                          force_match=settings.force_match)

    gt_dropped = np.zeros(max(len(gts), 1), dtype=bool)
    if settings.drop is not None and gts:
        gt_dropped[:len(gts)] = [settings.drop.drops(g) for g in gts]
    n_dropped_gts = int(gt_dropped.sum())

    # Normalizer over all levels of this image: the positive-anchor count,
    # as in the base single-stage recipe (focal terms of the easy negatives
    # vanish, so dividing by the anchor total would starve the positives).
    n_pos = 0
    dropped_maps = {}
    for l, labels in tmap.labels.items():
        pos = labels >= 0
        dropped = np.zeros_like(pos)
        if n_dropped_gts:
            matched = tmap.matched_gt[l]
            dropped[pos] = gt_dropped[matched[pos]]
        dropped_maps[l] = dropped
        n_pos += int((pos & ~dropped).sum())

    cls_terms = []
    reg_terms = []
    for l in sorted(pyramid.levels):
        labels = tmap.labels[l]          # [A, H, W]
        dropped = dropped_maps[l]
        h, w = labels.shape[1:]

        if cfg.variant == DATA_DEPENDENT:
            cls_theta, reg_theta = model.bank_thetas(enc_arr, pyramid.levels[l])
        else:
            cls_theta, reg_theta = model.bank_thetas(enc_arr)
        out_cls, out_reg = model.head_outputs(towers[l], cls_theta, reg_theta)

        pos = (labels >= 0) & ~dropped
        counted = (labels != LABEL_IGNORED) & ~(dropped & (labels >= 0))
        y = np.zeros((a, c, h, w))
        ai, yi, xi = np.nonzero(pos)
        y[ai, labels[ai, yi, xi], yi, xi] = 1.0
        w_anchor = counted / float(max(n_pos, 1))
        wpos = (cfg.focal_alpha * y * w_anchor[:, None]).reshape(a * c, h, w)
        wneg = ((1.0 - cfg.focal_alpha) * (1.0 - y) * w_anchor[:, None]).reshape(a * c, h, w)
        cls_terms.append(_focal_sum(out_cls, wpos, wneg, cfg.focal_gamma))

        if pos.any():
            targets = tmap.reg_targets[l].transpose(0, 3, 1, 2).reshape(a * 4, h, w)
            w_reg = np.repeat(pos[:, None], 4, axis=1).reshape(a * 4, h, w) \
                / float(max(n_pos, 1))
            diff = ad.sub(out_reg, Tensor(targets))
            reg_terms.append(ad.weighted_sum(ad.huber(diff, cfg.smooth_l1_beta), w_reg))

    cls_loss = cls_terms[0]
    for t in cls_terms[1:]:
        cls_loss = ad.add(cls_loss, t)
    if reg_terms:
        reg_loss = reg_terms[0]
        for t in reg_terms[1:]:
            reg_loss = ad.add(reg_loss, t)
    else:
        reg_loss = ad.scale(cls_loss, 0.0)
    return cls_loss, reg_loss, n_pos, n_dropped_gts


def training_step(model: DetectionModel,
                  batch: list[tuple[Tensor, list[GroundTruthBox]]],
                  settings: TrainSettings,
                  rng: np.random.Generator) -> StepStats:
    """One optimization step over a batch of (image, ground truths) pairs.

    Meta mode perturbs every configured encoding once per step (shared by
    the whole batch) and assigns targets against the perturbed pixel boxes;
    fixed mode always trains its predefined anchors.
    """
    if not batch:
        raise ValueError("training_step: empty batch")
    if model.config.mode == MODE_META and settings.augment_delta > 0:
        encodings = [augment(e, rng, settings.augment_delta)
                     for e in model.train_encodings]
    else:
        encodings = model.train_encodings

    cls_total = reg_total = None
    n_pos = n_dropped = 0
    for image, gts in batch:
        cls_l, reg_l, pos, dropped = _image_loss(model, image, gts, encodings, settings)
        cls_total = cls_l if cls_total is None else ad.add(cls_total, cls_l)
        reg_total = reg_l if reg_total is None else ad.add(reg_total, reg_l)
        n_pos += pos
        n_dropped += dropped

    inv = 1.0 / len(batch)
    loss = ad.scale(ad.add(cls_total, reg_total), inv)
    if not np.isfinite(loss.data):
        raise ad.GradientError(f"non-finite training loss {loss.data!r}")
    ad.backward(loss)
    ad.sgd_step(model.store, settings.lr, settings.momentum)
    return StepStats(loss=float(loss.data),
                     cls_loss=float(cls_total.data) * inv,
                     reg_loss=float(reg_total.data) * inv,
                     num_positive=n_pos,
                     num_dropped_gts=n_dropped)


@dataclass
class FitLogRow:
    step: int
    loss: float
    cls_loss: float
    reg_loss: float
    num_positive: int
    num_dropped_gts: int


def fit(model: DetectionModel,
        dataset: Sequence[tuple[np.ndarray, Sequence[GroundTruthBox]]],
        settings: TrainSettings, steps: int, batch_size: int = 1,
        seed: int = 0, log_every: int = 10) -> list[FitLogRow]:
    """Run `steps` optimization steps over a dataset of (image, boxes) pairs.

    Images cycle in a seed-shuffled order, reshuffled every epoch.  All
    randomness (batch order and anchor perturbation) comes from one
    generator, so a (seed, dataset, settings) triple fixes the entire run.
    """
    if steps < 1:
        raise ValueError("fit: need at least one step")
    if not dataset:
        raise ValueError("fit: empty dataset")
    rng = np.random.default_rng([int(seed), 0x7A])
    tensors = [(Tensor(img), list(gts)) for img, gts in dataset]
    order: list[int] = []
    log: list[FitLogRow] = []
    for step in range(steps):
        batch = []
        for _ in range(batch_size):
            if not order:
                order = [int(i) for i in rng.permutation(len(tensors))]
            batch.append(tensors[order.pop()])
        stats = training_step(model, batch, settings, rng)
        if step % log_every == 0 or step == steps - 1:
            log.append(FitLogRow(step, stats.loss, stats.cls_loss,
                                 stats.reg_loss, stats.num_positive,
                                 stats.num_dropped_gts))
    return log


# ---------------------------------------------------------------------------
# checkpointing
# ---------------------------------------------------------------------------

def save_model(model: DetectionModel, stem) -> tuple[Path, Path]:
    """Write <stem>.manc (parameters) and <stem>.json (geometry/anchors)."""
    stem = Path(stem)
    params_path = stem.with_suffix(".manc")
    meta_path = stem.with_suffix(".json")
    ad.save_params(model.store, params_path)
    meta = {
        "model": asdict(model.config),
        "anchors": {
            "encodings": [[e.eh, e.ew] for e in model.train_encodings],
            "standard": {"AH": model.standard.AH, "AW": model.standard.AW,
                         "level": model.standard.level},
        },
        "params_file": params_path.name,
        "class_names": model.class_names,
    }
    meta_path.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return params_path, meta_path


def load_model(path) -> DetectionModel:
    """Load from a checkpoint stem, .json, or .manc path."""
    p = Path(path)
    meta_path = p if p.suffix == ".json" else p.with_suffix(".json")
    if not meta_path.exists():
        raise FileNotFoundError(f"checkpoint metadata {meta_path} not found")
    meta = json.loads(meta_path.read_text())
    config = ModelConfig(**meta["model"])
    store = ad.load_params(meta_path.parent / meta["params_file"])
    encodings = [AnchorEncoding(*e) for e in meta["anchors"]["encodings"]]
    std = meta["anchors"]["standard"]
    standard = StandardBox(std["AH"], std["AW"], std["level"])

    gen_cls = gen_reg = None
    if config.mode == MODE_META:
        def bind(block, prefix, num_classes):
            kwargs = {}
            for name in ("W1", "W11", "W12"):
                key = prefix + name
                kwargs[name] = store[key] if key in store else None
            return GeneratorParams(
                block, num_classes, config.feat_channels, config.hidden,
                config.variant, store[prefix + "theta_star"],
                store[prefix + "W2"], **kwargs)

        gen_cls = bind("cls", "gen.cls.", config.num_classes)
        gen_reg = bind("reg", "gen.reg.", None)
    return DetectionModel(config, store, encodings, standard, gen_cls, gen_reg,
                          meta.get("class_names"))

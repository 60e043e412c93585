"""Experiment configuration: a flat UTF-8 key-value document.

One assignment per line, `dotted.key = value`, with `#` comments and blank
lines allowed.  Values parse as JSON when possible (numbers, booleans,
lists) and fall back to bare strings, so `generator.variant =
data-independent` works unquoted.  Unknown keys are rejected; every known
key has a default recorded in the schema below.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .anchors import AnchorConfiguration, build_configuration
from .detector import DropSettings, ModelConfig, TrainSettings
from .matching import MatchThresholds

__all__ = ["ConfigError", "ExperimentConfig", "parse_kv_text", "format_kv"]


class ConfigError(ValueError):
    """Config file fails validation."""


def _is_number(v) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def _number_list(v) -> bool:
    return isinstance(v, list) and len(v) > 0 and all(_is_number(x) for x in v)


# key -> (validator, default); None default means "required when used"
SCHEMA: dict[str, tuple] = {
    "data.dataset": (lambda v: isinstance(v, str), None),
    "anchors.n_scales": (lambda v: isinstance(v, int) and v >= 1, 3),
    "anchors.ratios": (_number_list, [0.5, 1.0, 2.0]),
    "anchors.base_size": (lambda v: _is_number(v) and v > 0, 32.0),
    "thresholds.t_pos": (lambda v: _is_number(v) and 0 < v <= 1, 0.5),
    "thresholds.t_neg": (lambda v: _is_number(v) and 0 <= v <= 1, 0.4),
    "generator.variant": (lambda v: v in ("data-independent", "data-dependent"),
                          "data-independent"),
    "generator.m": (lambda v: isinstance(v, int) and v >= 1, 128),
    "model.mode": (lambda v: v in ("meta", "fixed"), "meta"),
    "model.feat_channels": (lambda v: isinstance(v, int) and v >= 1, 32),
    "model.levels": (lambda v: isinstance(v, int) and v >= 1, 3),
    "model.tower_depth": (lambda v: isinstance(v, int) and v >= 0, 2),
    "model.focal_alpha": (lambda v: _is_number(v) and 0 < v <= 1, 0.25),
    "model.focal_gamma": (lambda v: _is_number(v) and v >= 0, 2.0),
    "model.smooth_l1_beta": (lambda v: _is_number(v) and v > 0, 1.0),
    "model.prior_prob": (lambda v: _is_number(v) and 0 < v < 1, 0.01),
    "train.lr": (lambda v: _is_number(v) and v > 0, 0.01),
    "train.momentum": (lambda v: _is_number(v) and 0 <= v < 1, 0.9),
    "train.steps": (lambda v: isinstance(v, int) and v >= 1, 500),
    "train.seed": (lambda v: isinstance(v, int), 0),
    "train.augment_delta": (lambda v: _is_number(v) and v >= 0, 0.5),
    "train.batch_size": (lambda v: isinstance(v, int) and v >= 1, 1),
    "train.force_match": (lambda v: isinstance(v, bool), True),
    "train.log_every": (lambda v: isinstance(v, int) and v >= 1, 10),
    "drop_boxes.enabled": (lambda v: isinstance(v, bool), False),
    "drop_boxes.min_sqrt_hw": (lambda v: _is_number(v) and v >= 0, 50.0),
    "drop_boxes.max_sqrt_hw": (lambda v: _is_number(v) and v > 0, 100.0),
    "drop_boxes.log_ratio_bound": (lambda v: _is_number(v) and v >= 0, 1.0),
    "eval.score_thresh": (lambda v: _is_number(v) and 0 <= v < 1, 0.05),
    "eval.nms_iou": (lambda v: _is_number(v) and 0 <= v <= 1, 0.5),
    "eval.max_dets": (lambda v: v is None or (isinstance(v, int) and v >= 1), None),
    "eval.split": (lambda v: isinstance(v, str), "val"),
    "search.split": (lambda v: isinstance(v, str), "search_subset"),
    "search.max_images": (lambda v: isinstance(v, int) and v >= 1, 200),
    "search.steps": (lambda v: v is None or (isinstance(v, int) and v >= 1), None),
    "search.seed": (lambda v: isinstance(v, int), 0),
}


def parse_kv_text(text: str) -> dict[str, Any]:
    """Parse `key = value` lines; JSON values with bare-string fallback."""
    out: dict[str, Any] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        try:
            out[key] = json.loads(value)
        except json.JSONDecodeError:
            out[key] = value
    return out


def format_kv(values: dict[str, Any]) -> str:
    """Stable flat rendering used for the provenance echo."""
    lines = []
    for key in sorted(values):
        v = values[key]
        lines.append(f"{key} = {json.dumps(v)}")
    return "\n".join(lines) + "\n"


@dataclass
class ExperimentConfig:
    """Validated union of the module configs plus paths and seeds."""

    values: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        unknown = set(self.values) - set(SCHEMA)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        merged = {}
        for key, (check, default) in SCHEMA.items():
            v = self.values.get(key, default)
            if isinstance(v, float) and v.is_integer() and isinstance(default, int) \
                    and not isinstance(default, bool):
                v = int(v)
            if v is not None and not check(v):
                raise ConfigError(f"invalid value for {key}: {v!r}")
            merged[key] = v
        if merged["thresholds.t_neg"] > merged["thresholds.t_pos"]:
            raise ConfigError("thresholds.t_neg must not exceed thresholds.t_pos")
        if merged["drop_boxes.min_sqrt_hw"] >= merged["drop_boxes.max_sqrt_hw"]:
            raise ConfigError("drop_boxes.min_sqrt_hw must be below max_sqrt_hw")
        self.values = merged

    @classmethod
    def from_text(cls, text: str) -> "ExperimentConfig":
        return cls(parse_kv_text(text))

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file {p} not found")
        return cls.from_text(p.read_text(encoding="utf-8"))

    def __getitem__(self, key: str) -> Any:
        return self.values[key]

    def override(self, **dotted) -> "ExperimentConfig":
        values = dict(self.values)
        values.update({k.replace("__", "."): v for k, v in dotted.items()})
        return ExperimentConfig(values)

    def with_value(self, key: str, value) -> "ExperimentConfig":
        values = dict(self.values)
        values[key] = value
        return ExperimentConfig(values)

    def echo_text(self) -> str:
        return format_kv(self.values)

    # -- typed views ---------------------------------------------------------

    def require_dataset(self) -> str:
        ds = self.values["data.dataset"]
        if not ds:
            raise ConfigError("data.dataset is required")
        return ds

    def anchor_configuration(self) -> AnchorConfiguration:
        return build_configuration(self["anchors.n_scales"],
                                   self["anchors.ratios"],
                                   self["anchors.base_size"])

    def model_config(self, num_classes: int) -> ModelConfig:
        return ModelConfig(
            num_classes=num_classes,
            feat_channels=self["model.feat_channels"],
            num_levels=self["model.levels"],
            tower_depth=self["model.tower_depth"],
            hidden=self["generator.m"],
            variant=self["generator.variant"],
            mode=self["model.mode"],
            focal_alpha=self["model.focal_alpha"],
            focal_gamma=self["model.focal_gamma"],
            smooth_l1_beta=self["model.smooth_l1_beta"],
            prior_prob=self["model.prior_prob"],
        )

    def train_settings(self) -> TrainSettings:
        drop = None
        if self["drop_boxes.enabled"]:
            drop = DropSettings(self["drop_boxes.min_sqrt_hw"],
                                self["drop_boxes.max_sqrt_hw"],
                                self["drop_boxes.log_ratio_bound"])
        return TrainSettings(
            lr=self["train.lr"],
            momentum=self["train.momentum"],
            augment_delta=self["train.augment_delta"],
            thresholds=MatchThresholds(self["thresholds.t_pos"],
                                       self["thresholds.t_neg"]),
            force_match=self["train.force_match"],
            drop=drop,
        )

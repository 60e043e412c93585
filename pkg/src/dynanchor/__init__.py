"""dynanchor: single-stage detection with filters generated from anchor boxes.

The detection head's per-anchor classification and regression filters are
not fixed tables: a small generator network maps a 2-vector log-size
encoding of any anchor box to the full filter bank, so the anchor set is a
free inference-time choice.  The package bundles the numeric substrate
(reverse-mode autodiff over float64 numpy arrays), anchor geometry, the
generator, target assignment, training, evaluation, greedy anchor search,
a synthetic shapes dataset, and a CLI tying them together.
"""

from .anchors import (
    AnchorBox,
    AnchorConfiguration,
    AnchorEncoding,
    StandardBox,
    build_configuration,
)
from .detector import DetectionModel, ModelConfig, TrainSettings, fit, init_model
from .evaluation import EvalResult, mmap
from .inference import Detection, default_search_pool, detect, greedy_search, nms
from .matching import GroundTruthBox, MatchThresholds

__version__ = "0.1.0"

__all__ = [
    "AnchorBox",
    "AnchorConfiguration",
    "AnchorEncoding",
    "StandardBox",
    "build_configuration",
    "DetectionModel",
    "ModelConfig",
    "TrainSettings",
    "fit",
    "init_model",
    "EvalResult",
    "mmap",
    "Detection",
    "default_search_pool",
    "detect",
    "greedy_search",
    "nms",
    "GroundTruthBox",
    "MatchThresholds",
    "__version__",
]

"""Filter-bank generation: map an anchor encoding to detection-head weights.

The generated parameter vector is a learnable shared base plus a low-rank
residual from a two-layer projection of the encoding:

    theta_b = theta* + W2 relu(W1 b)                      (data-independent)
    theta_b = theta* + W2 relu(W11 b + W12 gap(x))        (data-dependent)

There are no bias terms inside the residual: a bias on W2 would be redundant
with theta*, and omitting W1's bias gives the exact identity theta_(0,0) =
theta*, which the tests pin down bit-for-bit.

Flat layout of a full parameter vector, fixed and relied on by serialization:
[cls filters (C*C_feat*9) | cls biases (C) | reg filters (4*C_feat*9) |
reg biases (4)], each filter block row-major [out, in, 3, 3].
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .anchors import AnchorEncoding
from .autodiff import ParamStore, Tensor

__all__ = [
    "GeneratorParams",
    "FilterBank",
    "cls_block_dim",
    "reg_block_dim",
    "theta_dim",
    "flatten_bank",
    "unflatten_bank",
    "init_generator",
    "generate_theta",
    "generate_theta_many",
    "generate",
    "generate_dd",
    "two_head_generate",
]

DATA_INDEPENDENT = "data-independent"
DATA_DEPENDENT = "data-dependent"


def cls_block_dim(num_classes: int, feat_channels: int) -> int:
    return num_classes * feat_channels * 9 + num_classes


def reg_block_dim(feat_channels: int) -> int:
    return 4 * feat_channels * 9 + 4


def theta_dim(num_classes: int, feat_channels: int) -> int:
    """Length of a full flattened bank (cls then reg block)."""
    if num_classes < 1 or feat_channels < 1:
        raise ValueError(
            f"need positive class and channel counts, got {num_classes}, {feat_channels}")
    return cls_block_dim(num_classes, feat_channels) + reg_block_dim(feat_channels)


@dataclass
class FilterBank:
    """Head weights for one anchor: per-class 3x3 cls filters plus 4 reg filters."""

    cls_filters: Tensor  # [C, C_feat, 3, 3]
    cls_bias: Tensor     # [C]
    reg_filters: Tensor  # [4, C_feat, 3, 3]
    reg_bias: Tensor     # [4]

    @property
    def num_classes(self) -> int:
        return self.cls_filters.data.shape[0]

    @property
    def feat_channels(self) -> int:
        return self.cls_filters.data.shape[1]


def flatten_bank(bank: FilterBank) -> Tensor:
    c, f = bank.num_classes, bank.feat_channels
    return ad.concat0([
        ad.reshape(bank.cls_filters, (c * f * 9,)),
        bank.cls_bias,
        ad.reshape(bank.reg_filters, (4 * f * 9,)),
        bank.reg_bias,
    ])


def unflatten_bank(theta: Tensor, num_classes: int, feat_channels: int) -> FilterBank:
    c, f = num_classes, feat_channels
    d_cls_f = c * f * 9
    d_reg_f = 4 * f * 9
    expect = d_cls_f + c + d_reg_f + 4
    if theta.data.shape != (expect,):
        raise ad.ShapeError(
            f"unflatten_bank: theta length {theta.data.shape} != ({expect},) "
            f"for C={c}, C_feat={f}")
    o = 0
    cls_filters = ad.reshape(ad.slice_axis0(theta, o, o + d_cls_f), (c, f, 3, 3))
    o += d_cls_f
    cls_bias = ad.slice_axis0(theta, o, o + c)
    o += c
    reg_filters = ad.reshape(ad.slice_axis0(theta, o, o + d_reg_f), (4, f, 3, 3))
    o += d_reg_f
    reg_bias = ad.slice_axis0(theta, o, o + 4)
    return FilterBank(cls_filters, cls_bias, reg_filters, reg_bias)


@dataclass
class GeneratorParams:
    """Learnable pieces of one generator.

    ``block`` records what the flat vector sizes: a full bank ("full"), the
    classification half ("cls"), or the regression half ("reg"); two block
    generators concatenate into one full bank.
    """

    block: str                  # "full" | "cls" | "reg"
    num_classes: int | None     # None for a pure reg block
    feat_channels: int
    m: int
    variant: str
    theta_star: Tensor          # [D]
    W2: Tensor                  # [D, m]
    W1: Tensor | None = None    # [m, 2]   (data-independent)
    W11: Tensor | None = None   # [m, 2]   (data-dependent)
    W12: Tensor | None = None   # [m, d_feat] (data-dependent)

    @property
    def dim(self) -> int:
        return self.theta_star.data.shape[0]

    def tensors(self) -> dict[str, Tensor]:
        out = {"theta_star": self.theta_star, "W2": self.W2}
        for name in ("W1", "W11", "W12"):
            t = getattr(self, name)
            if t is not None:
                out[name] = t
        return out


def _block_dim(block: str, num_classes: int | None, feat_channels: int) -> int:
    if block == "cls":
        if num_classes is None:
            raise ValueError("cls block needs a class count")
        return cls_block_dim(num_classes, feat_channels)
    if block == "reg":
        return reg_block_dim(feat_channels)
    if block == "full":
        if num_classes is None:
            raise ValueError("full block needs a class count")
        return theta_dim(num_classes, feat_channels)
    raise ValueError(f"unknown block {block!r}")


def init_generator(block: str, num_classes: int | None, feat_channels: int,
                   m: int, rng: np.random.Generator,
                   variant: str = DATA_INDEPENDENT,
                   prior_prob: float = 0.01,
                   store: ParamStore | None = None,
                   prefix: str = "") -> GeneratorParams:
    """Fresh generator parameters, optionally registered under a name prefix.

    Projections draw from uniform(+-1/sqrt(fan_in)).  theta*'s filter and reg
    bias entries draw like a conv layer of fan-in C_feat*9; its cls bias
    entries start at -ln((1-pi)/pi) so initial foreground scores sit near the
    prior probability pi.
    """
    if m < 1:
        raise ValueError(f"hidden width must be >= 1, got {m}")
    if variant not in (DATA_INDEPENDENT, DATA_DEPENDENT):
        raise ValueError(f"unknown generator variant {variant!r}")
    d = _block_dim(block, num_classes, feat_channels)

    def uni(fan_in, *shape):
        bound = 1.0 / math.sqrt(fan_in)
        return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)

    theta = rng.uniform(-1.0, 1.0, size=d) / math.sqrt(feat_channels * 9)
    bias_value = -math.log((1.0 - prior_prob) / prior_prob)
    if block in ("cls", "full") and num_classes is not None:
        c = num_classes
        theta[c * feat_channels * 9:c * feat_channels * 9 + c] = bias_value
    theta_star = Tensor(theta, requires_grad=True)
    W2 = uni(m, d, m)
    if variant == DATA_INDEPENDENT:
        params = GeneratorParams(block, num_classes, feat_channels, m, variant,
                                 theta_star, W2, W1=uni(2, m, 2))
    else:
        params = GeneratorParams(block, num_classes, feat_channels, m, variant,
                                 theta_star, W2,
                                 W11=uni(2, m, 2), W12=uni(feat_channels, m, feat_channels))
    if store is not None:
        for name, t in params.tensors().items():
            store.add(prefix + name, t)
    return params


def _rebind(params: GeneratorParams, store: ParamStore, prefix: str) -> GeneratorParams:
    """Point a params view at tensors living in a (loaded) store."""
    kwargs = {}
    for name in ("theta_star", "W2", "W1", "W11", "W12"):
        key = prefix + name
        kwargs[name] = store[key] if key in store else None
    return GeneratorParams(params.block, params.num_classes, params.feat_channels,
                           params.m, params.variant, **kwargs)


def generate_theta(params: GeneratorParams, enc: AnchorEncoding,
                   feature: Tensor | None = None) -> Tensor:
    """theta* plus the encoding-conditioned residual, as a flat [D] tensor."""
    b = Tensor(enc.as_array())
    if params.variant == DATA_INDEPENDENT:
        if feature is not None:
            raise ValueError("data-independent generator takes no feature input")
        hidden = ad.relu(ad.linear(b, params.W1))
    else:
        if feature is None:
            raise ValueError("data-dependent generator requires a feature map")
        pooled = ad.global_avg_pool(feature)
        if pooled.data.shape[0] != params.W12.data.shape[1]:
            raise ad.ShapeError(
                f"feature channels {pooled.data.shape[0]} != W12 width "
                f"{params.W12.data.shape[1]}")
        hidden = ad.relu(ad.add(ad.linear(b, params.W11), ad.linear(pooled, params.W12)))
    return ad.add(params.theta_star, ad.linear(hidden, params.W2))


def generate_theta_many(params: GeneratorParams, encodings: np.ndarray,
                        feature: Tensor | None = None) -> Tensor:
    """Batched residual generation: [A, 2] encodings -> [A, D] parameter rows."""
    encs = Tensor(np.asarray(encodings, dtype=np.float64))
    if params.variant == DATA_INDEPENDENT:
        hidden = ad.relu(ad.matmul_nt(encs, params.W1))
    else:
        if feature is None:
            raise ValueError("data-dependent generator requires a feature map")
        pooled = ad.global_avg_pool(feature)
        hidden = ad.relu(
            ad.add_rowvec(ad.matmul_nt(encs, params.W11),
                          ad.linear(pooled, params.W12)))
    residual = ad.matmul_nt(hidden, params.W2)
    return ad.add_rowvec(residual, params.theta_star)


def generate(params: GeneratorParams, enc: AnchorEncoding) -> FilterBank:
    """Full bank from a data-independent generator sized for a whole head."""
    if params.variant != DATA_INDEPENDENT:
        raise ValueError(f"generate() needs the data-independent variant, "
                         f"got {params.variant!r}")
    if params.block != "full":
        raise ValueError("generate() needs a full-bank generator; use "
                         "two_head_generate for split cls/reg generators")
    theta = generate_theta(params, enc)
    return unflatten_bank(theta, params.num_classes, params.feat_channels)


def generate_dd(params: GeneratorParams, enc: AnchorEncoding,
                feature: Tensor) -> FilterBank:
    """Full bank from a data-dependent generator (pooled-feature conditioned)."""
    if params.variant != DATA_DEPENDENT:
        raise ValueError(f"generate_dd() needs the data-dependent variant, "
                         f"got {params.variant!r}")
    if params.block != "full":
        raise ValueError("generate_dd() needs a full-bank generator")
    theta = generate_theta(params, enc, feature)
    return unflatten_bank(theta, params.num_classes, params.feat_channels)


def two_head_generate(cls_params: GeneratorParams, reg_params: GeneratorParams,
                      enc: AnchorEncoding,
                      feature: Tensor | None = None) -> FilterBank:
    """Independent cls/reg generators whose halves concatenate into one bank."""
    if cls_params.block != "cls" or reg_params.block != "reg":
        raise ValueError(
            f"two_head_generate needs (cls, reg) block generators, got "
            f"({cls_params.block!r}, {reg_params.block!r})")
    if cls_params.feat_channels != reg_params.feat_channels:
        raise ad.ShapeError(
            f"cls/reg feature channels differ: {cls_params.feat_channels} "
            f"vs {reg_params.feat_channels}")
    feats = (feature,) if feature is not None else (None,)
    cls_theta = generate_theta(cls_params, enc, *feats)
    reg_theta = generate_theta(reg_params, enc, *feats)
    theta = ad.concat0([cls_theta, reg_theta])
    return unflatten_bank(theta, cls_params.num_classes, cls_params.feat_channels)

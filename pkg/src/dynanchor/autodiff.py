"""Minimal reverse-mode differentiable numeric core.

Everything is 64-bit: tensors hold float64 numpy arrays in row-major order,
which keeps central finite-difference checks tight.  The op set is exactly
what the detector needs (dense layers, 3x3 convolution, pooling, pointwise
nonlinearities, reductions and a few shape ops); there is no general
broadcasting and no GPU path.

Ops build a DAG of `Tensor` nodes.  `backward(loss)` propagates adjoints in
reverse topological order and accumulates them into the ``grad`` buffer of
every tensor with ``requires_grad`` set; repeated calls keep accumulating
until grads are zeroed.  Wrapping code in `no_grad()` skips graph recording
entirely, which is how inference runs at full numpy speed.
"""

from __future__ import annotations

import struct
from contextlib import contextmanager
from typing import Callable, Iterator, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ParamStore",
    "ShapeError",
    "GradientError",
    "SerializationError",
    "no_grad",
    "backward",
    "sgd_step",
    "save_params",
    "load_params",
    # ops
    "add",
    "sub",
    "mul",
    "neg",
    "scale",
    "add_scalar",
    "add_rowvec",
    "matmul",
    "matmul_nt",
    "linear",
    "conv2d_3x3",
    "avg_pool_2x2",
    "global_avg_pool",
    "relu",
    "sigmoid",
    "softplus",
    "log",
    "exp",
    "pow_const",
    "huber",
    "sum_all",
    "mean_all",
    "weighted_sum",
    "reshape",
    "slice_axis0",
    "slice_cols",
    "concat0",
    "stack_rows",
]


class ShapeError(ValueError):
    """Operand shapes are inconsistent; the message names the offending dim."""


class GradientError(RuntimeError):
    """backward()/sgd_step() misuse or non-finite gradients."""


class SerializationError(ValueError):
    """Malformed parameter file."""


_grad_enabled = True


@contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block (inference fast path)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """A float64 array node in the computation graph.

    Treat ``data`` as immutable once the tensor participates in a graph;
    the only sanctioned in-place mutations are grad accumulation and the
    optimizer's parameter update.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad) and _grad_enabled
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad[...] = 0.0

    def _acc(self, g: np.ndarray) -> None:
        """Accumulate an adjoint, allocating the buffer on first use."""
        if self.grad is None:
            if g.shape == self.data.shape:
                self.grad = np.array(g, dtype=np.float64)
            else:  # broadcast-shaped adjoint (e.g. pooled reductions)
                self.grad = np.zeros_like(self.data)
                self.grad += g
        else:
            self.grad += g

    def _grad_buffer(self) -> np.ndarray:
        """Full-size grad buffer for scatter-style accumulation."""
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        return self.grad

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # Small conveniences; the functional ops below are the real surface.
    def __add__(self, other):
        return add(self, other) if isinstance(other, Tensor) else add_scalar(self, other)

    def __sub__(self, other):
        return sub(self, other) if isinstance(other, Tensor) else add_scalar(self, -other)

    def __mul__(self, other):
        return mul(self, other) if isinstance(other, Tensor) else scale(self, other)

    def __rmul__(self, other):
        return scale(self, other)

    def __neg__(self):
        return neg(self)


def _make(data: np.ndarray, parents: Sequence[Tensor],
          backward_fn: Callable[[np.ndarray], None] | None) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _as_array(t: Tensor, name: str) -> np.ndarray:
    if not isinstance(t, Tensor):
        raise TypeError(f"{name} must be a Tensor, got {type(t).__name__}")
    return t.data


# ---------------------------------------------------------------------------
# elementwise and arithmetic ops
# ---------------------------------------------------------------------------

def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"{op}: operand shapes {a.data.shape} and {b.data.shape} differ")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "add")

    def back(g, a=a, b=b):
        if a.requires_grad:
            a._acc(g)
        if b.requires_grad:
            b._acc(g)

    return _make(a.data + b.data, (a, b), back)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "sub")

    def back(g, a=a, b=b):
        if a.requires_grad:
            a._acc(g)
        if b.requires_grad:
            b._acc(-g)

    return _make(a.data - b.data, (a, b), back)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "mul")

    def back(g, a=a, b=b):
        if a.requires_grad:
            a._acc(g * b.data)
        if b.requires_grad:
            b._acc(g * a.data)

    return _make(a.data * b.data, (a, b), back)


def neg(a: Tensor) -> Tensor:
    def back(g, a=a):
        if a.requires_grad:
            a._acc(-g)

    return _make(-a.data, (a,), back)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)

    def back(g, a=a):
        if a.requires_grad:
            a._acc(c * g)

    return _make(c * a.data, (a,), back)


def add_scalar(a: Tensor, c: float) -> Tensor:
    c = float(c)

    def back(g, a=a):
        if a.requires_grad:
            a._acc(g)

    return _make(a.data + c, (a,), back)


def add_rowvec(a: Tensor, v: Tensor) -> Tensor:
    """[A, D] + [D] broadcast over rows."""
    if a.data.ndim != 2 or v.data.ndim != 1 or a.data.shape[1] != v.data.shape[0]:
        raise ShapeError(
            f"add_rowvec: expected [A,D] + [D], got {a.data.shape} + {v.data.shape}")

    def back(g, a=a, v=v):
        if a.requires_grad:
            a._acc(g)
        if v.requires_grad:
            v._acc(g.sum(axis=0))

    return _make(a.data + v.data[None, :], (a, v), back)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0.0  # subgradient at 0 is 0

    def back(g, x=x, mask=mask):
        if x.requires_grad:
            x._acc(g * mask)

    return _make(np.where(mask, x.data, 0.0), (x,), back)


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    s = np.empty_like(d)
    pos = d >= 0
    s[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    ex = np.exp(d[~pos])
    s[~pos] = ex / (1.0 + ex)

    def back(g, x=x, s=s):
        if x.requires_grad:
            x._acc(g * s * (1.0 - s))

    return _make(s, (x,), back)


def softplus(x: Tensor) -> Tensor:
    """log(1 + e^x), computed stably; derivative is sigmoid(x)."""
    d = x.data
    out = np.log1p(np.exp(-np.abs(d))) + np.maximum(d, 0.0)

    def back(g, x=x):
        if x.requires_grad:
            d = x.data
            s = np.empty_like(d)
            pos = d >= 0
            s[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
            ex = np.exp(d[~pos])
            s[~pos] = ex / (1.0 + ex)
            x._acc(g * s)

    return _make(out, (x,), back)


def log(x: Tensor) -> Tensor:
    def back(g, x=x):
        if x.requires_grad:
            x._acc(g / x.data)

    return _make(np.log(x.data), (x,), back)


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)

    def back(g, x=x, out=out):
        if x.requires_grad:
            x._acc(g * out)

    return _make(out, (x,), back)


def pow_const(x: Tensor, p: float) -> Tensor:
    """x**p for constant p; p must be 0, or >= 1 for differentiability at 0."""
    p = float(p)

    def back(g, x=x, p=p):
        if not x.requires_grad:
            return
        if p == 0.0:
            return
        if p == 1.0:
            x._acc(g)
        else:
            x._acc(g * p * np.power(x.data, p - 1.0))

    return _make(np.power(x.data, p), (x,), back)


def huber(x: Tensor, beta: float) -> Tensor:
    """Elementwise 0.5*x^2/beta for |x|<beta, else |x|-0.5*beta."""
    beta = float(beta)
    if beta <= 0:
        raise ValueError(f"huber: beta must be positive, got {beta}")
    d = x.data
    small = np.abs(d) < beta
    out = np.where(small, 0.5 * d * d / beta, np.abs(d) - 0.5 * beta)

    def back(g, x=x, beta=beta):
        if x.requires_grad:
            x._acc(g * np.clip(x.data / beta, -1.0, 1.0))

    return _make(out, (x,), back)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(
            f"matmul: inner dimensions {a.data.shape} @ {b.data.shape} do not agree")

    def back(g, a=a, b=b):
        if a.requires_grad:
            a._acc(g @ b.data.T)
        if b.requires_grad:
            b._acc(a.data.T @ g)

    return _make(a.data @ b.data, (a, b), back)


def matmul_nt(a: Tensor, b: Tensor) -> Tensor:
    """a @ b.T without materializing a transpose node."""
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[1]:
        raise ShapeError(
            f"matmul_nt: trailing dimensions {a.data.shape} x {b.data.shape} do not agree")

    def back(g, a=a, b=b):
        if a.requires_grad:
            a._acc(g @ b.data)
        if b.requires_grad:
            b._acc(g.T @ a.data)

    return _make(a.data @ b.data.T, (a, b), back)


def linear(x: Tensor, W: Tensor, bias: Tensor | None = None) -> Tensor:
    """W @ x (+ bias) for a vector x; W is [m, n], x is [n]."""
    if x.data.ndim != 1 or W.data.ndim != 2:
        raise ShapeError(
            f"linear: expected vector x and matrix W, got {x.data.shape} and {W.data.shape}")
    if W.data.shape[1] != x.data.shape[0]:
        raise ShapeError(
            f"linear: W columns {W.data.shape[1]} != x length {x.data.shape[0]}")
    out = W.data @ x.data
    parents = [x, W]
    if bias is not None:
        if bias.data.shape != (W.data.shape[0],):
            raise ShapeError(
                f"linear: bias shape {bias.data.shape} != ({W.data.shape[0]},)")
        out = out + bias.data
        parents.append(bias)

    def back(g, x=x, W=W, bias=bias):
        if W.requires_grad:
            W._acc(np.outer(g, x.data))
        if x.requires_grad:
            x._acc(W.data.T @ g)
        if bias is not None and bias.requires_grad:
            bias._acc(g)

    return _make(out, parents, back)


# ---------------------------------------------------------------------------
# convolution and pooling
# ---------------------------------------------------------------------------

def _im2col_3x3(x: np.ndarray) -> np.ndarray:
    """[C,H,W] -> [H*W, C*9] patch matrix for stride-1, pad-1 3x3 windows."""
    c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (3, 3), axis=(1, 2))
    # win: [C, H, W, 3, 3] -> [H, W, C, 3, 3] -> [H*W, C*9]
    return np.ascontiguousarray(win.transpose(1, 2, 0, 3, 4)).reshape(h * w, c * 9)


def _col2im_3x3(gcols: np.ndarray, c: int, h: int, w: int) -> np.ndarray:
    """Scatter-add [H*W, C*9] patch grads back to a [C,H,W] input grad."""
    gc = gcols.reshape(h, w, c, 3, 3).transpose(2, 0, 1, 3, 4)
    gxp = np.zeros((c, h + 2, w + 2))
    for di in range(3):
        for dj in range(3):
            gxp[:, di:di + h, dj:dj + w] += gc[:, :, :, di, dj]
    return gxp[:, 1:h + 1, 1:w + 1]


def conv2d_3x3(x: Tensor, filters: Tensor, bias: Tensor | None = None) -> Tensor:
    """Cross-correlation, stride 1, zero padding 1.

    x is [C_in, H, W], filters [C_out, C_in, 3, 3], bias [C_out] or None.
    """
    if x.data.ndim != 3:
        raise ShapeError(f"conv2d_3x3: input must be [C,H,W], got {x.data.shape}")
    if filters.data.ndim != 4 or filters.data.shape[2:] != (3, 3):
        raise ShapeError(
            f"conv2d_3x3: filters must be [C_out,C_in,3,3], got {filters.data.shape}")
    cin, h, w = x.data.shape
    cout = filters.data.shape[0]
    if filters.data.shape[1] != cin:
        raise ShapeError(
            f"conv2d_3x3: input channels {cin} != filter channels {filters.data.shape[1]}")
    if bias is not None and bias.data.shape != (cout,):
        raise ShapeError(
            f"conv2d_3x3: bias shape {bias.data.shape} != ({cout},)")

    cols = _im2col_3x3(x.data)                      # [H*W, C_in*9]
    wmat = filters.data.reshape(cout, cin * 9)
    out = cols @ wmat.T                             # [H*W, C_out]
    if bias is not None:
        out = out + bias.data[None, :]
    out = np.ascontiguousarray(out.T).reshape(cout, h, w)
    parents = [x, filters] if bias is None else [x, filters, bias]

    def back(g, x=x, filters=filters, bias=bias, cols=cols,
             cin=cin, cout=cout, h=h, w=w):
        gmat = g.reshape(cout, h * w).T             # [H*W, C_out]
        if filters.requires_grad:
            filters._acc((gmat.T @ cols).reshape(cout, cin, 3, 3))
        if x.requires_grad:
            gcols = gmat @ filters.data.reshape(cout, cin * 9)
            x._acc(_col2im_3x3(gcols, cin, h, w))
        if bias is not None and bias.requires_grad:
            bias._acc(g.sum(axis=(1, 2)))

    return _make(out, parents, back)


def avg_pool_2x2(x: Tensor) -> Tensor:
    """Non-overlapping 2x2 mean pooling; spatial dims must be even."""
    if x.data.ndim != 3:
        raise ShapeError(f"avg_pool_2x2: input must be [C,H,W], got {x.data.shape}")
    c, h, w = x.data.shape
    if h % 2 or w % 2:
        raise ShapeError(f"avg_pool_2x2: spatial dims ({h},{w}) must be even")
    out = x.data.reshape(c, h // 2, 2, w // 2, 2).mean(axis=(2, 4))

    def back(g, x=x):
        if x.requires_grad:
            x._acc(np.repeat(np.repeat(g, 2, axis=1), 2, axis=2) * 0.25)

    return _make(out, (x,), back)


def global_avg_pool(x: Tensor) -> Tensor:
    """Per-channel spatial mean: [C,H,W] -> [C]."""
    if x.data.ndim != 3:
        raise ShapeError(f"global_avg_pool: input must be [C,H,W], got {x.data.shape}")
    c, h, w = x.data.shape
    if h < 1 or w < 1:
        raise ShapeError(f"global_avg_pool: empty spatial extent ({h},{w})")

    def back(g, x=x, h=h, w=w):
        if x.requires_grad:
            x._acc(g[:, None, None] / (h * w))

    return _make(x.data.mean(axis=(1, 2)), (x,), back)


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------

def sum_all(x: Tensor) -> Tensor:
    def back(g, x=x):
        if x.requires_grad:
            x._acc(np.broadcast_to(g, x.data.shape))

    return _make(np.asarray(x.data.sum()), (x,), back)


def mean_all(x: Tensor) -> Tensor:
    n = x.data.size

    def back(g, x=x, n=n):
        if x.requires_grad:
            x._acc(np.broadcast_to(g / n, x.data.shape))

    return _make(np.asarray(x.data.mean()), (x,), back)


def weighted_sum(x: Tensor, w: np.ndarray) -> Tensor:
    """sum(x * w) for a constant weight array of the same shape."""
    w = np.asarray(w, dtype=np.float64)
    if w.shape != x.data.shape:
        raise ShapeError(f"weighted_sum: weight shape {w.shape} != {x.data.shape}")

    def back(g, x=x, w=w):
        if x.requires_grad:
            x._acc(g * w)

    return _make(np.asarray(np.vdot(x.data, w)), (x,), back)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)

    def back(g, x=x):
        if x.requires_grad:
            x._acc(g.reshape(x.data.shape))

    return _make(x.data.reshape(shape), (x,), back)


def slice_axis0(x: Tensor, start: int, stop: int) -> Tensor:
    if not (0 <= start <= stop <= x.data.shape[0]):
        raise ShapeError(
            f"slice_axis0: range [{start},{stop}) outside axis of length {x.data.shape[0]}")

    def back(g, x=x, start=start, stop=stop):
        if x.requires_grad:
            x._grad_buffer()[start:stop] += g

    return _make(x.data[start:stop], (x,), back)


def slice_cols(x: Tensor, start: int, stop: int) -> Tensor:
    if x.data.ndim != 2:
        raise ShapeError(f"slice_cols: input must be 2-D, got {x.data.shape}")
    if not (0 <= start <= stop <= x.data.shape[1]):
        raise ShapeError(
            f"slice_cols: range [{start},{stop}) outside axis of length {x.data.shape[1]}")

    def back(g, x=x, start=start, stop=stop):
        if x.requires_grad:
            x._grad_buffer()[:, start:stop] += g

    return _make(np.ascontiguousarray(x.data[:, start:stop]), (x,), back)


def concat0(parts: Sequence[Tensor]) -> Tensor:
    if not parts:
        raise ShapeError("concat0: empty part list")
    lengths = [p.data.shape[0] for p in parts]

    def back(g, parts=tuple(parts), lengths=lengths):
        off = 0
        for p, n in zip(parts, lengths):
            if p.requires_grad:
                p._acc(g[off:off + n])
            off += n

    return _make(np.concatenate([p.data for p in parts], axis=0), parts, back)


def stack_rows(parts: Sequence[Tensor]) -> Tensor:
    """Stack equally-shaped 1-D tensors into a [len(parts), D] matrix."""
    if not parts:
        raise ShapeError("stack_rows: empty part list")
    d = parts[0].data.shape
    for p in parts:
        if p.data.shape != d:
            raise ShapeError(f"stack_rows: row shape {p.data.shape} != {d}")

    def back(g, parts=tuple(parts)):
        for i, p in enumerate(parts):
            if p.requires_grad:
                p._acc(g[i])

    return _make(np.stack([p.data for p in parts], axis=0), parts, back)


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------

def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(t) into t.grad for every reachable requires_grad t.

    loss must be a scalar (shape ()).  Adjoint flow uses a per-call buffer,
    so calling backward twice on the same graph adds the same gradients
    twice, matching the accumulate-until-zeroed contract.
    """
    if loss.data.shape != ():
        raise GradientError(
            f"backward() requires a scalar loss, got shape {loss.data.shape}")
    if not loss.requires_grad:
        raise GradientError("loss does not depend on any tensor with requires_grad")

    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    # Per-call adjoints; final values are added into persistent .grad buffers.
    saved = {id(n): n.grad for n in topo}
    for n in topo:
        n.grad = None
    loss.grad = np.ones_like(loss.data)
    for n in reversed(topo):
        if n._backward is not None and n.grad is not None:
            n._backward(n.grad)
    for n in topo:
        fresh = n.grad
        prev = saved[id(n)]
        if prev is None:
            n.grad = fresh
        else:
            if fresh is not None:
                prev += fresh
            n.grad = prev


# ---------------------------------------------------------------------------
# parameter store and SGD
# ---------------------------------------------------------------------------

class ParamStore:
    """Named map of trainable tensors; iteration is sorted by identifier."""

    def __init__(self) -> None:
        self._params: dict[str, Tensor] = {}
        self._velocity: dict[str, np.ndarray] = {}

    def add(self, name: str, tensor: Tensor) -> Tensor:
        if name in self._params:
            raise ValueError(f"parameter {name!r} already registered")
        if not tensor.requires_grad:
            raise ValueError(f"parameter {name!r} must have requires_grad set")
        self._params[name] = tensor
        return tensor

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return sorted(self._params)

    def items(self) -> list[tuple[str, Tensor]]:
        return [(k, self._params[k]) for k in self.names()]

    def zero_grad(self) -> None:
        for _, t in self.items():
            t.zero_grad()

    def velocity(self, name: str) -> np.ndarray:
        v = self._velocity.get(name)
        if v is None:
            v = np.zeros_like(self._params[name].data)
            self._velocity[name] = v
        return v


def sgd_step(store: ParamStore, lr: float, momentum: float = 0.0) -> None:
    """v <- momentum*v + grad; param <- param - lr*v; then zero grads."""
    if lr <= 0:
        raise ValueError(f"sgd_step: lr must be positive, got {lr}")
    if not (0.0 <= momentum < 1.0):
        raise ValueError(f"sgd_step: momentum must be in [0,1), got {momentum}")
    for name, p in store.items():
        g = p.grad
        if not np.all(np.isfinite(g)):
            raise GradientError(f"non-finite gradient in parameter {name!r}")
        v = store.velocity(name)
        v *= momentum
        v += g
        p.data -= lr * v
    store.zero_grad()


# ---------------------------------------------------------------------------
# binary serialization
# ---------------------------------------------------------------------------

_MAGIC = b"MANC"
_VERSION = 1


def save_params(store: ParamStore, path) -> None:
    """Flat binary: magic, u32 version, then sorted per-parameter records.

    Record layout (little-endian): u32 name length, UTF-8 name bytes,
    u32 rank, rank x u64 extents, row-major f64 payload.
    """
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<I", _VERSION))
        for name, t in store.items():
            nb = name.encode("utf-8")
            f.write(struct.pack("<I", len(nb)))
            f.write(nb)
            f.write(struct.pack("<I", t.data.ndim))
            for ext in t.data.shape:
                f.write(struct.pack("<Q", ext))
            f.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())


def load_params(path) -> ParamStore:
    store = ParamStore()
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != _MAGIC:
        raise SerializationError(f"bad magic {blob[:4]!r}, expected {_MAGIC!r}")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != _VERSION:
        raise SerializationError(f"unsupported version {version}")
    off = 8
    total = len(blob)
    while off < total:
        if off + 4 > total:
            raise SerializationError("truncated record header")
        (nlen,) = struct.unpack_from("<I", blob, off)
        off += 4
        name = blob[off:off + nlen].decode("utf-8")
        off += nlen
        (rank,) = struct.unpack_from("<I", blob, off)
        off += 4
        extents = struct.unpack_from(f"<{rank}Q", blob, off)
        off += 8 * rank
        count = int(np.prod(extents)) if rank else 1
        end = off + 8 * count
        if end > total:
            raise SerializationError(f"truncated payload for parameter {name!r}")
        data = np.frombuffer(blob[off:end], dtype="<f8").reshape(extents).copy()
        off = end
        store.add(name, Tensor(data, requires_grad=True))
    return store

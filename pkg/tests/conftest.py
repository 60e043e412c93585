"""Shared test utilities: finite-difference oracle and gradient comparison."""

from __future__ import annotations

from typing import Callable

import numpy as np

from dynanchor.autodiff import Tensor


def finite_difference_grad(f: Callable[[], Tensor], param: Tensor,
                           h: float = 1e-5) -> np.ndarray:
    """Central finite differences of the scalar f() w.r.t. param, in place.

    f must rebuild its graph on every call and read param.data; the data is
    restored entry by entry.  Independent of the reverse-mode path.
    """
    base = param.data
    grad = np.zeros_like(base)
    it = np.nditer(base, flags=["multi_index"], op_flags=[["readonly"]])
    while not it.finished:
        idx = it.multi_index
        orig = base[idx]
        base[idx] = orig + h
        fp = f().item()
        base[idx] = orig - h
        fm = f().item()
        base[idx] = orig
        grad[idx] = (fp - fm) / (2.0 * h)
        it.iternext()
    return grad


def assert_grads_match(analytic: np.ndarray, numeric: np.ndarray,
                       rtol: float = 1e-6, atol: float = 1e-9) -> None:
    np.testing.assert_allclose(analytic, numeric, rtol=rtol, atol=atol)


def check_param_grads(loss_fn: Callable[[], Tensor], params, rtol: float = 1e-6,
                      atol: float = 1e-9, h: float = 1e-5) -> None:
    """Backward through loss_fn once, then verify each param against FD."""
    from dynanchor.autodiff import backward

    for p in params:
        p.zero_grad()
    loss = loss_fn()
    backward(loss)
    for p in params:
        fd = finite_difference_grad(loss_fn, p, h=h)
        assert_grads_match(p.grad, fd, rtol=rtol, atol=atol)

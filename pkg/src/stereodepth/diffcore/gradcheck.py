from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import NonFiniteError, ShapeError, Tensor


class GradientCheckError(AssertionError):
    pass


def numerical_gradient(
    closure: Callable[[], Tensor], t: Tensor, step: float, indices: Sequence[int] | None = None
) -> np.ndarray:
    """Central differences of a scalar closure w.r.t. the elements of ``t``.

    ``indices`` (flat positions) restricts the probe; other entries stay 0.
    """
    grad = np.zeros(t.shape)
    flat = t.data.reshape(-1)
    gflat = grad.reshape(-1)
    for idx in range(flat.size) if indices is None else indices:
        orig = flat[idx]
        flat[idx] = orig + step
        f_plus = _scalar(closure())
        flat[idx] = orig - step
        f_minus = _scalar(closure())
        flat[idx] = orig
        gflat[idx] = (f_plus - f_minus) / (2.0 * step)
    return grad


def _scalar(out: Tensor) -> float:
    if out.size != 1:
        raise ShapeError(f"grad_check needs a scalar-valued closure, got shape {out.shape}")
    value = float(out.data.reshape(()))
    if not np.isfinite(value):
        raise NonFiniteError(f"closure returned {value}")
    return value


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return np.abs(analytic - numeric) / denom


def grad_check(
    closure: Callable[[], Tensor],
    inputs: Sequence[Tensor],
    step: float = 1e-5,
    tolerance: float | None = None,
    max_elements: int | None = None,
    seed: int = 0,
) -> float:
    """Largest relative error between analytic and central-difference gradients.

    ``closure`` must rebuild its graph from ``inputs`` on every call and return
    a scalar. When ``tolerance`` is given a larger error raises
    :class:`GradientCheckError`. With ``max_elements`` each input larger than
    that is probed at a seeded random subset of its entries.
    """
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    out = closure()
    _scalar(out)
    out.backward()
    worst = 0.0
    worst_at = None
    for k, t in enumerate(inputs):
        analytic = t.grad if t.grad is not None else np.zeros(t.shape)
        if max_elements is not None and t.size > max_elements:
            picks = np.random.default_rng([seed, k]).choice(t.size, max_elements, replace=False)
        else:
            picks = np.arange(t.size)
        numeric = numerical_gradient(closure, t, step, picks)
        err = np.zeros(t.shape)
        err.reshape(-1)[picks] = relative_error(analytic.reshape(-1)[picks], numeric.reshape(-1)[picks])
        if err.size and err.max() > worst:
            worst = float(err.max())
            worst_at = (k, np.unravel_index(int(err.argmax()), t.shape))
    if tolerance is not None and worst > tolerance:
        raise GradientCheckError(f"max relative error {worst:.3e} > {tolerance:.1e} at input/index {worst_at}")
    return worst

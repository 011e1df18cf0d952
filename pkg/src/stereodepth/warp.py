"""Horizontal backward warping along rectified scanlines.

Geometry: a left-image pixel ``(i, j)`` with disparity ``d`` sees the same
scene point as right-image pixel ``(i, j - d)``. Hence

* the left view is rebuilt from the right one by sampling at ``j - d_left``
  (``LEFT_FROM_RIGHT``, sign -1);
* the right view is rebuilt from the left one by sampling at ``j + d_right``
  (``RIGHT_FROM_LEFT``, sign +1).

Sampling positions outside ``[0, W-1]`` are clamped to the border column.
"""
from __future__ import annotations

import enum

import numpy as np

from .diffcore import ShapeError, Tensor, make_result, reshape


class SampleDirection(enum.IntEnum):
    LEFT_FROM_RIGHT = -1
    RIGHT_FROM_LEFT = 1


def _sample_coords(disp: np.ndarray, width: int, sign: int):
    cols = np.arange(width, dtype=np.float64)
    x = cols + sign * disp
    inside = (x >= 0.0) & (x <= width - 1)
    xc = np.clip(x, 0.0, width - 1)
    x0 = np.floor(xc).astype(np.int64)
    x1 = np.minimum(x0 + 1, width - 1)
    frac = xc - x0
    return x0, x1, frac, inside


def bilinear_sample(source: Tensor, disparity: Tensor, direction: SampleDirection | int) -> Tensor:
    """Sample ``source`` (``[N x] C x H x W``) at column ``j + sign * disparity``.

    ``disparity`` is ``[N x] H x W`` in pixels. Differentiable w.r.t. both.
    """
    sign = int(direction)
    if sign not in (-1, 1):
        raise ValueError(f"direction must be -1 or +1, got {direction}")
    src = source.data
    disp = disparity.data
    if src.ndim < 3 or disp.shape != src.shape[:-3] + src.shape[-2:]:
        raise ShapeError(f"bilinear_sample: source {src.shape} and disparity {disp.shape} disagree")
    if np.isnan(disp).any():
        raise ValueError("bilinear_sample: NaN disparity")
    width = src.shape[-1]
    x0, x1, frac, inside = _sample_coords(disp, width, sign)
    # broadcast the per-pixel sampling pattern over channels
    idx0 = np.expand_dims(x0, -3)
    idx1 = np.expand_dims(x1, -3)
    wgt = np.expand_dims(frac, -3)
    idx0 = np.broadcast_to(idx0, src.shape)
    idx1 = np.broadcast_to(idx1, src.shape)
    v0 = np.take_along_axis(src, idx0, axis=-1)
    v1 = np.take_along_axis(src, idx1, axis=-1)
    out = (1.0 - wgt) * v0 + wgt * v1

    def backward(g):
        grad_src = None
        if source.requires_grad:
            # scatter-add via bincount over flat row offsets
            rows = np.arange(src.size // width, dtype=np.int64).reshape(src.shape[:-1] + (1,)) * width
            flat0 = (rows + idx0).reshape(-1)
            flat1 = (rows + idx1).reshape(-1)
            grad_src = np.bincount(flat0, weights=(g * (1.0 - wgt)).reshape(-1), minlength=src.size)
            grad_src += np.bincount(flat1, weights=(g * wgt).reshape(-1), minlength=src.size)
            grad_src = grad_src.reshape(src.shape)
        grad_disp = None
        if disparity.requires_grad:
            slope = (g * (v1 - v0)).sum(axis=-3)
            grad_disp = sign * slope * inside
        return (grad_src, grad_disp)

    return make_result(out, (source, disparity), backward, "bilinear_sample")


def reconstruct_left(right_image: Tensor, d_left: Tensor) -> Tensor:
    """Rebuild the left view from the right one using left-aligned disparity."""
    return bilinear_sample(right_image, d_left, SampleDirection.LEFT_FROM_RIGHT)


def reconstruct_right(left_image: Tensor, d_right: Tensor) -> Tensor:
    return bilinear_sample(left_image, d_right, SampleDirection.RIGHT_FROM_LEFT)


def project_disparity(d_other: Tensor, d_base: Tensor, direction: SampleDirection | int) -> Tensor:
    """Resample a single-channel disparity map onto the base view's grid."""
    if d_other.shape != d_base.shape:
        raise ShapeError(f"project_disparity: {d_other.shape} vs {d_base.shape}")
    shape = d_other.shape
    as_image = reshape(d_other, shape[:-2] + (1,) + shape[-2:])
    return reshape(bilinear_sample(as_image, d_base, direction), shape)

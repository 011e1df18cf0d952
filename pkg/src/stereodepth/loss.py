"""Training objective: appearance, smoothness and left-right consistency terms."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import diffcore as dc
from .diffcore import ShapeError, Tensor
from .warp import SampleDirection, project_disparity, reconstruct_left, reconstruct_right

SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


@dataclass
class LossWeights:
    alpha_ap: float = 1.0
    alpha_lr: float = 1.0
    alpha_ds_base: float = 0.1
    ssim_alpha: float = 0.85
    ssim_c1: float = SSIM_C1
    ssim_c2: float = SSIM_C2
    # evaluate smoothness and consistency on d / W_s (fraction of image width)
    normalize_by_width: bool = True

    def __post_init__(self):
        for name, value in asdict(self).items():
            if not isinstance(value, bool) and value < 0:
                raise ValueError(f"LossWeights.{name} must be non-negative, got {value}")
        if self.ssim_alpha > 1:
            raise ValueError(f"ssim_alpha must lie in [0, 1], got {self.ssim_alpha}")

    def alpha_ds(self, r: float) -> float:
        """Smoothness weight at a level downscaled by ``r`` from the input."""
        return self.alpha_ds_base / r


@dataclass
class ScaleLossBreakdown:
    c_ap_l: Tensor
    c_ap_r: Tensor
    c_ds_l: Tensor
    c_ds_r: Tensor
    c_lr_l: Tensor
    c_lr_r: Tensor
    c_total: Tensor
    r: float = 1.0
    extras: dict = field(default_factory=dict)

    TERMS = ("c_ap_l", "c_ap_r", "c_ds_l", "c_ds_r", "c_lr_l", "c_lr_r", "c_total")

    def values(self) -> dict[str, float]:
        return {name: getattr(self, name).item() for name in self.TERMS}


def ssim_map(x: Tensor, y: Tensor, c1: float = SSIM_C1, c2: float = SSIM_C2) -> Tensor:
    """SSIM over every 3x3 window fully inside the image, box-filtered.

    Returns ``[N x] C x (H-2) x (W-2)``.
    """
    if x.shape != y.shape:
        raise ShapeError(f"ssim_map: {x.shape} vs {y.shape}")
    if x.ndim < 2 or x.shape[-1] < 3 or x.shape[-2] < 3:
        raise ShapeError(f"ssim_map: images must be at least 3x3, got {x.shape}")
    mu_x = dc.box_filter3(x)
    mu_y = dc.box_filter3(y)
    mu_xx = mu_x * mu_x
    mu_yy = mu_y * mu_y
    mu_xy = mu_x * mu_y
    var_x = dc.clamp_min(dc.box_filter3(x * x) - mu_xx, 0.0)
    var_y = dc.clamp_min(dc.box_filter3(y * y) - mu_yy, 0.0)
    cov = dc.box_filter3(x * y) - mu_xy
    num = (mu_xy * 2.0 + c1) * (cov * 2.0 + c2)
    den = (mu_xx + mu_yy + c1) * (var_x + var_y + c2)
    return num / den


def _interior(t: Tensor) -> Tensor:
    return t[..., 1:-1, 1:-1]


def _eroded_mask(mask: np.ndarray) -> np.ndarray:
    """Interior pixels whose whole 3x3 window lies inside ``mask``."""
    m = np.asarray(mask, dtype=bool)
    h, w = m.shape[-2:]
    out = np.ones(m.shape[:-2] + (h - 2, w - 2), dtype=bool)
    for i in range(3):
        for j in range(3):
            out &= m[..., i : i + h - 2, j : j + w - 2]
    return out


def appearance_map(image: Tensor, recon: Tensor, w: LossWeights) -> Tensor:
    """Per-pixel photometric cost on the valid interior."""
    if image.shape != recon.shape:
        raise ShapeError(f"appearance_loss: {image.shape} vs {recon.shape}")
    ssim = ssim_map(image, recon, w.ssim_c1, w.ssim_c2)
    l1 = dc.abs(_interior(image) - _interior(recon))
    return (1.0 - ssim) * (w.ssim_alpha / 2.0) + l1 * (1.0 - w.ssim_alpha)


def appearance_loss(image: Tensor, recon: Tensor, w: LossWeights, mask: np.ndarray | None = None) -> Tensor:
    """Mean of ``alpha (1 - SSIM)/2 + (1 - alpha)|I - I~|`` over the valid interior.

    With ``mask`` (``[N x] H x W`` boolean) only interior pixels whose full
    3x3 window is inside the mask contribute.
    """
    cost = appearance_map(image, recon, w)
    if mask is None:
        return dc.mean(cost)
    keep = _eroded_mask(mask)
    keep = np.broadcast_to(np.expand_dims(keep, -3), cost.shape)
    return dc.masked_mean(cost, keep)


def edge_weights(image: Tensor) -> tuple[Tensor, Tensor]:
    """``exp(-mean_c |dI|)`` for forward differences along x and y."""
    gx = dc.channel_mean(dc.abs(image[..., :, 1:] - image[..., :, :-1]))
    gy = dc.channel_mean(dc.abs(image[..., 1:, :] - image[..., :-1, :]))
    return dc.exp(-gx), dc.exp(-gy)


def smoothness_loss(d: Tensor, image: Tensor) -> Tensor:
    """Edge-aware L1 penalty on disparity forward differences, normalised by H*W."""
    if image.ndim < 3 or d.shape != image.shape[:-3] + image.shape[-2:]:
        raise ShapeError(f"smoothness_loss: disparity {d.shape} vs image {image.shape}")
    wx, wy = edge_weights(image)
    dx = d[..., :, 1:] - d[..., :, :-1]
    dy = d[..., 1:, :] - d[..., :-1, :]
    total = dc.sum(dc.abs(dx) * wx) + dc.sum(dc.abs(dy) * wy)
    return total / float(d.size)


def lr_consistency_loss(d_l: Tensor, d_r: Tensor) -> Tensor:
    """mean |d_l - d_r projected onto the left grid|."""
    if d_l.shape != d_r.shape:
        raise ShapeError(f"lr_consistency_loss: {d_l.shape} vs {d_r.shape}")
    projected = project_disparity(d_r, d_l, SampleDirection.LEFT_FROM_RIGHT)
    return dc.mean(dc.abs(d_l - projected))


def lr_consistency_loss_right(d_l: Tensor, d_r: Tensor) -> Tensor:
    if d_l.shape != d_r.shape:
        raise ShapeError(f"lr_consistency_loss_right: {d_l.shape} vs {d_r.shape}")
    projected = project_disparity(d_l, d_r, SampleDirection.RIGHT_FROM_LEFT)
    return dc.mean(dc.abs(d_r - projected))


def scale_loss(
    image_l: Tensor,
    image_r: Tensor,
    d_l: Tensor,
    d_r: Tensor,
    r: float,
    w: LossWeights,
) -> ScaleLossBreakdown:
    """All six terms at one pyramid level plus their weighted sum.

    Disparities arrive in pixels of this level. Image sampling uses them as
    is; with ``w.normalize_by_width`` the smoothness and consistency terms are
    measured on ``d / W_s`` so their balance against the appearance term does not depend
    on the resolution.
    """
    recon_l = reconstruct_left(image_r, d_l)
    recon_r = reconstruct_right(image_l, d_r)
    c_ap_l = appearance_loss(image_l, recon_l, w)
    c_ap_r = appearance_loss(image_r, recon_r, w)
    c_ds_l = smoothness_loss(d_l, image_l)
    c_ds_r = smoothness_loss(d_r, image_r)
    c_lr_l = lr_consistency_loss(d_l, d_r)
    c_lr_r = lr_consistency_loss_right(d_l, d_r)
    if w.normalize_by_width:
        # both terms are linear in d, so scaling the value equals using d / W_s
        inv_width = 1.0 / d_l.shape[-1]
        c_ds_l, c_ds_r = c_ds_l * inv_width, c_ds_r * inv_width
        c_lr_l, c_lr_r = c_lr_l * inv_width, c_lr_r * inv_width
    total = (
        (c_ap_l + c_ap_r) * w.alpha_ap
        + (c_ds_l + c_ds_r) * w.alpha_ds(r)
        + (c_lr_l + c_lr_r) * w.alpha_lr
    )
    return ScaleLossBreakdown(c_ap_l, c_ap_r, c_ds_l, c_ds_r, c_lr_l, c_lr_r, total, r=r)


def total_loss(images_l, images_r, disparities, w: LossWeights) -> tuple[Tensor, list[ScaleLossBreakdown]]:
    """Sum of per-scale losses with identical weighting across scales.

    ``images_l`` / ``images_r`` are pyramids (finest first) and
    ``disparities`` a matching sequence of ``(d_l, d_r)`` pairs. Level ``s``
    (0-based) is downscaled by ``r = 2**s``.
    """
    if not (len(images_l) == len(images_r) == len(disparities)) or not disparities:
        raise ShapeError("total_loss: pyramids must be non-empty and of equal depth")
    breakdowns = []
    total = None
    for s, (il, ir, (dl, dr)) in enumerate(zip(images_l, images_r, disparities)):
        b = scale_loss(il, ir, dl, dr, float(2 ** s), w)
        breakdowns.append(b)
        total = b.c_total if total is None else total + b.c_total
    return total, breakdowns

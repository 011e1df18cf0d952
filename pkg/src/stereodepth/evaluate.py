"""Disparity to depth, error metrics, flip post-processing and dataset evaluation."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .data.io import load_entry, read_manifest
from .data.synthetic import CameraModel
from .diffcore import Tensor, no_grad
from .model import NetConfig, forward, load_checkpoint
from .warp import SampleDirection, project_disparity

DEFAULT_CAP = 80.0
METRIC_NAMES = ("abs_rel", "sq_rel", "rmse", "rmse_log", "d1_all", "delta1", "delta2", "delta3")


@dataclass
class MetricsReport:
    abs_rel: float = 0.0
    sq_rel: float = 0.0
    rmse: float = 0.0
    rmse_log: float = 0.0
    d1_all: float = 0.0  # percent
    delta1: float = 0.0
    delta2: float = 0.0
    delta3: float = 0.0
    pixels: int = 0

    def as_dict(self) -> dict:
        return asdict(self)

    def table(self) -> str:
        head = " ".join(f"{name:>10}" for name in METRIC_NAMES)
        row = " ".join(f"{getattr(self, name):>10.4f}" for name in METRIC_NAMES)
        return f"{head}\n{row}"


def disparity_to_depth(disparity: np.ndarray, camera: CameraModel, cap: float = DEFAULT_CAP) -> np.ndarray:
    """``min(b f / d, cap)``; disparities at or below ``b f / cap`` give ``cap``."""
    if not cap > 0:
        raise ValueError(f"cap must be positive, got {cap}")
    d = np.asarray(disparity, dtype=np.float64)
    bf = camera.baseline * camera.focal
    out = np.full(d.shape, float(cap))
    far = d <= bf / cap
    out[~far] = np.minimum(bf / d[~far], cap)
    return out


def depth_to_disparity(depth: np.ndarray, camera: CameraModel) -> np.ndarray:
    return camera.baseline * camera.focal / np.asarray(depth, dtype=np.float64)


def _check_mask(shape, mask):
    mask = np.ones(shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if mask.shape != shape:
        raise ValueError(f"mask {mask.shape} vs maps {shape}")
    if not mask.any():
        raise ValueError("no valid pixels to evaluate")
    return mask


def depth_metrics(pred_depth: np.ndarray, gt_depth: np.ndarray, valid_mask: np.ndarray | None = None) -> MetricsReport:
    """Depth error statistics over the valid pixels (``d1_all`` left at 0)."""
    pred_depth = np.asarray(pred_depth, dtype=np.float64)
    gt_depth = np.asarray(gt_depth, dtype=np.float64)
    if pred_depth.shape != gt_depth.shape:
        raise ValueError(f"prediction {pred_depth.shape} vs ground truth {gt_depth.shape}")
    mask = _check_mask(gt_depth.shape, valid_mask)
    p, g = pred_depth[mask], gt_depth[mask]
    if (p <= 0).any() or (g <= 0).any():
        raise ValueError("depths must be positive for the log and ratio metrics")
    diff = p - g
    ratio = np.maximum(p / g, g / p)
    return MetricsReport(
        abs_rel=float(np.mean(np.abs(diff) / g)),
        sq_rel=float(np.mean(diff ** 2 / g)),
        rmse=float(np.sqrt(np.mean(diff ** 2))),
        rmse_log=float(np.sqrt(np.mean((np.log(p) - np.log(g)) ** 2))),
        delta1=float(np.mean(ratio < 1.25)),
        delta2=float(np.mean(ratio < 1.25 ** 2)),
        delta3=float(np.mean(ratio < 1.25 ** 3)),
        pixels=int(mask.sum()),
    )


def d1_all(pred_disp: np.ndarray, gt_disp: np.ndarray, valid_mask: np.ndarray | None = None) -> float:
    """Percentage of valid pixels whose error exceeds both 3 px and 5% of the truth."""
    pred_disp = np.asarray(pred_disp, dtype=np.float64)
    gt_disp = np.asarray(gt_disp, dtype=np.float64)
    if pred_disp.shape != gt_disp.shape:
        raise ValueError(f"prediction {pred_disp.shape} vs ground truth {gt_disp.shape}")
    mask = _check_mask(gt_disp.shape, valid_mask)
    err = np.abs(pred_disp[mask] - gt_disp[mask])
    bad = (err > 3.0) & (err > 0.05 * gt_disp[mask])
    return 100.0 * float(bad.mean())


def postprocess_bands(width: int) -> tuple[int, int]:
    """``(a, b)``: columns ``< a`` come from the mirrored run, ``>= b`` from the plain run.

    ``a = ceil(0.05 W)`` and ``b = floor(0.95 W)``, evaluated in integers.
    """
    return (5 * width + 99) // 100, (95 * width) // 100


def postprocess(d_l: np.ndarray, d_l_flipped_run: np.ndarray) -> np.ndarray:
    """Blend a prediction with the prediction for the mirrored input.

    ``d_l_flipped_run`` is the raw output for the horizontally flipped image;
    it is mirrored back here. The left edge band takes the mirrored run, the
    right edge band the plain run, and the rest their mean.
    """
    d_l = np.asarray(d_l, dtype=np.float64)
    back = np.asarray(d_l_flipped_run, dtype=np.float64)[..., ::-1]
    if d_l.shape != back.shape:
        raise ValueError(f"postprocess: {d_l.shape} vs {back.shape}")
    a, b = postprocess_bands(d_l.shape[-1])
    out = 0.5 * (d_l + back)
    out[..., :a] = back[..., :a]
    out[..., b:] = d_l[..., b:]
    return out


def resize_bilinear(image: np.ndarray, height: int, width: int) -> np.ndarray:
    """Resize the last two axes with half-pixel-centred bilinear interpolation."""
    image = np.asarray(image, dtype=np.float64)
    h, w = image.shape[-2:]

    def axis_weights(n_out, n_in):
        pos = np.clip((np.arange(n_out) + 0.5) * n_in / n_out - 0.5, 0, n_in - 1)
        lo = np.floor(pos).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, pos - lo

    y0, y1, fy = axis_weights(height, h)
    x0, x1, fx = axis_weights(width, w)
    rows = image[..., y0, :] * (1 - fy)[:, None] + image[..., y1, :] * fy[:, None]
    return rows[..., x0] * (1 - fx) + rows[..., x1] * fx


def predict_disparity(
    net: NetConfig,
    params,
    left: np.ndarray,
    right: np.ndarray | None = None,
    pp: bool = False,
) -> np.ndarray:
    """Finest-scale left disparity in pixels of the input image.

    Inputs whose size is not a multiple of ``2**levels`` are resized to the
    nearest multiple, and the prediction is resized back with disparities
    rescaled by the width ratio.
    """
    h, w = left.shape[-2:]
    factor = 2 ** net.levels
    nh, nw = max(factor, round(h / factor) * factor), max(factor, round(w / factor) * factor)
    if (nh, nw) != (h, w):
        left = resize_bilinear(left, nh, nw)
        right = None if right is None else resize_bilinear(right, nh, nw)

    def run(l_img, r_img, take):
        with no_grad():
            out = forward(net, params, Tensor(l_img), None if r_img is None else Tensor(r_img))
        return out[0][take].data

    stereo = net.input_mode == "stereo"
    disp = run(left, right if stereo else None, 0)
    if pp:
        if stereo:
            # the mirrored pair swaps roles; its right-view output mirrors our left view
            flipped = run(right[..., ::-1].copy(), left[..., ::-1].copy(), 1)
        else:
            flipped = run(left[..., ::-1].copy(), None, 0)
        disp = postprocess(disp, flipped)
    if (nh, nw) != (h, w):
        disp = resize_bilinear(disp, h, w) * (w / nw)
    return disp


def image_metrics(pred_disp, gt_disp, camera: CameraModel, mask=None, cap: float = DEFAULT_CAP) -> MetricsReport:
    """All eight metrics for one image; pixels with non-positive truth are skipped."""
    gt_disp = np.asarray(gt_disp, dtype=np.float64)
    valid = gt_disp > 0
    if mask is not None:
        valid &= np.asarray(mask, dtype=bool)
    report = depth_metrics(
        disparity_to_depth(pred_disp, camera, cap),
        disparity_to_depth(gt_disp, camera, cap),
        valid,
    )
    report.d1_all = d1_all(pred_disp, gt_disp, valid)
    return report


def mean_report(reports: Sequence[MetricsReport]) -> MetricsReport:
    """Per-image metrics averaged with equal image weights."""
    if not reports:
        raise ValueError("no reports to average")
    out = MetricsReport(pixels=sum(r.pixels for r in reports))
    for name in METRIC_NAMES:
        setattr(out, name, math.fsum(getattr(r, name) for r in reports) / len(reports))
    return out


def crop_mask(shape, crop: tuple[int, int, int, int] | None) -> np.ndarray | None:
    """Boolean mask of the rectangle ``(x, y, w, h)``, or None for the full image."""
    if crop is None:
        return None
    x, y, w, h = crop
    height, width = shape
    if w <= 0 or h <= 0 or x < 0 or y < 0 or x + w > width or y + h > height:
        raise ValueError(f"crop {crop} does not fit a {width}x{height} image")
    mask = np.zeros(shape, dtype=bool)
    mask[y : y + h, x : x + w] = True
    return mask


@dataclass
class EvalResult:
    summary: MetricsReport
    rows: list[dict]
    predictions: dict


def evaluate_predictions(
    items,
    cap: float = DEFAULT_CAP,
    crop: tuple[int, int, int, int] | None = None,
) -> EvalResult:
    """``items`` yields ``(image_id, pred, gt, camera, valid_mask)`` tuples."""
    rows, reports, preds = [], [], {}
    for image_id, pred, gt, camera, valid in items:
        if gt is None:
            raise ValueError(f"{image_id}: no ground-truth disparity")
        mask = crop_mask(gt.shape, crop)
        if valid is not None:
            mask = valid if mask is None else mask & valid
        report = image_metrics(pred, gt, camera, mask, cap)
        reports.append(report)
        rows.append({"image_id": image_id, **{n: getattr(report, n) for n in METRIC_NAMES}, "pixels": report.pixels})
        preds[image_id] = pred
    return EvalResult(mean_report(reports), rows, preds)


def _entry_camera(entry, width: int) -> CameraModel:
    return CameraModel(entry.baseline or CameraModel.baseline, entry.focal or float(width))


def evaluate(
    checkpoint,
    manifest,
    cap: float = DEFAULT_CAP,
    crop: tuple[int, int, int, int] | None = None,
    pp: bool = False,
) -> EvalResult:
    net, params = load_checkpoint(checkpoint)

    def items():
        for entry in read_manifest(manifest):
            left, right, gt, mask = load_entry(entry)
            pred = predict_disparity(net, params, left, right if net.input_mode == "stereo" else None, pp=pp)
            yield entry.image_id, pred, gt, _entry_camera(entry, left.shape[-1]), mask

    return evaluate_predictions(items(), cap, crop)


def constant_baseline(manifest, value: float | None = None, cap: float = DEFAULT_CAP, crop=None) -> EvalResult:
    """Predict one disparity everywhere: ``value`` or the mean ground truth of the set."""
    loaded = [(e, load_entry(e)) for e in read_manifest(manifest)]
    if value is None:
        value = float(np.mean([gt[gt > 0].mean() for _, (_, _, gt, _) in loaded if gt is not None]))
    items = (
        (e.image_id, np.full(gt.shape, value), gt, _entry_camera(e, left.shape[-1]), mask)
        for e, (left, _, gt, mask) in loaded
    )
    return evaluate_predictions(items, cap, crop)


def mean_gt_disparity(manifest) -> float:
    """Mean positive ground-truth disparity over a manifest, images weighted equally."""
    values = []
    for entry in read_manifest(manifest):
        gt = load_entry(entry)[2]
        if gt is not None and (gt > 0).any():
            values.append(gt[gt > 0].mean())
    if not values:
        raise ValueError(f"{manifest}: no ground-truth disparities")
    return float(np.mean(values))


def consistency_residual(net: NetConfig, params, images: np.ndarray) -> float:
    """``mean |d_l - project(d_r, d_l)|`` at the finest scale over a batch of left images."""
    with no_grad():
        d_l, d_r = forward(net, params, Tensor(images))[0]
        proj = project_disparity(d_r, d_l, SampleDirection.LEFT_FROM_RIGHT)
    return float(np.abs(d_l.data - proj.data).mean())


def write_metrics_csv(path, rows: Sequence[dict]) -> None:
    cols = ["image_id", *METRIC_NAMES, "pixels"]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(cols)
        for row in rows:
            writer.writerow([row[c] if c in ("image_id", "pixels") else format(row[c], ".17g") for c in cols])


def write_summary_json(path, report: MetricsReport, extra: dict | None = None) -> None:
    payload = {"metrics": report.as_dict(), **(extra or {})}
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")

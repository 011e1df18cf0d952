"""Optimiser, learning-rate schedule, augmentation and the training loop."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import diffcore as dc
from .data.synthetic import StereoSample
from .diffcore import NonFiniteError, Tensor
from .loss import LossWeights, ScaleLossBreakdown, total_loss
from .model import NetConfig, forward, init
from .rng import Xoshiro256, derive_seed

log = logging.getLogger(__name__)


class TrainingDivergedError(FloatingPointError):
    def __init__(self, step: int, term: str, detail: str = ""):
        self.step = step
        self.term = term
        super().__init__(f"non-finite value at step {step} in {term}" + (f": {detail}" if detail else ""))


# ------------------------------------------------------------------ Adam

@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(state: AdamState, params: dict[str, Tensor], grads: dict[str, np.ndarray]) -> None:
    """Bias-corrected Adam update, applied to ``params`` in place."""
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def schedule(epoch: int, base_lr: float, total_epochs: int) -> float:
    """Constant for the first 60% of epochs, then halved every further 20%."""
    if total_epochs <= 0:
        raise ValueError("total_epochs must be positive")
    # integer form of: epoch < 0.6 T, halvings = 1 + floor((epoch - 0.6 T) / 0.2 T)
    if 5 * epoch < 3 * total_epochs:
        return base_lr
    halvings = 1 + (5 * epoch - 3 * total_epochs) // total_epochs
    return base_lr * 0.5 ** halvings


# ------------------------------------------------------------------ augmentation

@dataclass
class AugmentConfig:
    flip_prob: float = 0.5
    color_prob: float = 0.0  # off by default: it lowered held-out accuracy on the synthetic desk set
    gamma: tuple[float, float] = (0.8, 1.2)
    brightness: tuple[float, float] = (0.5, 2.0)
    channel: tuple[float, float] = (0.8, 1.2)

    def __post_init__(self):
        for name in ("flip_prob", "color_prob"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must be in [0, 1]")
        for name in ("gamma", "brightness", "channel"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name} range is reversed: {lo} > {hi}")
        self.gamma, self.brightness, self.channel = (tuple(self.gamma), tuple(self.brightness), tuple(self.channel))


@dataclass(frozen=True)
class AugmentDraw:
    flip: bool = False
    color: bool = False
    gamma: float = 1.0
    brightness: float = 1.0
    channel: tuple[float, float, float] = (1.0, 1.0, 1.0)


def draw_augmentation(rng: Xoshiro256, cfg: AugmentConfig) -> AugmentDraw:
    # a fixed number of draws per sample keeps the stream aligned
    flip = rng.random() < cfg.flip_prob
    color = rng.random() < cfg.color_prob
    gamma = rng.uniform(*cfg.gamma)
    brightness = rng.uniform(*cfg.brightness)
    channel = tuple(rng.uniform(*cfg.channel) for _ in range(3))
    return AugmentDraw(flip, color, gamma, brightness, channel)


def _flip(a):
    return None if a is None else np.ascontiguousarray(a[..., ::-1])


def apply_augmentation(sample: StereoSample, draw: AugmentDraw) -> StereoSample:
    """Flip mirrors both views and swaps their roles; colour shifts hit both views alike."""
    left, right = sample.left, sample.right
    gt_l, gt_r, mask = sample.gt_disparity_left, sample.gt_disparity_right, sample.valid_mask
    if draw.flip:
        left, right = _flip(right), _flip(left)
        gt_l, gt_r = _flip(gt_r), _flip(gt_l)
        mask = None  # visibility of the new left view is not known
    if draw.color:
        scale = draw.brightness * np.asarray(draw.channel)[:, None, None]
        left = np.clip(left ** draw.gamma * scale, 0.0, 1.0)
        right = np.clip(right ** draw.gamma * scale, 0.0, 1.0)
    return StereoSample(left, right, gt_l, sample.camera, gt_r, mask)


def augment(sample: StereoSample, cfg: AugmentConfig, rng: Xoshiro256) -> StereoSample:
    return apply_augmentation(sample, draw_augmentation(rng, cfg))


# ------------------------------------------------------------------ loop

@dataclass
class TrainConfig:
    steps: int = 500
    batch_size: int = 4
    learning_rate: float = 3e-3
    seed: int = 1
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    def __post_init__(self):
        if isinstance(self.augment, dict):
            self.augment = AugmentConfig(**self.augment)
        if self.steps < 1 or self.batch_size < 1:
            raise ValueError("steps and batch_size must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["augment"] = {k: list(v) if isinstance(v, tuple) else v for k, v in d["augment"].items()}
        return d


def image_pyramid(images: Tensor, levels: int) -> list[Tensor]:
    pyramid = [images]
    for _ in range(levels - 1):
        pyramid.append(dc.avgpool2x(pyramid[-1]))
    return pyramid


def batch_iterator(n_samples: int, batch_size: int, seed: int):
    """Yields ``(epoch, indices)``: a fresh permutation per epoch, short tail dropped."""
    if n_samples < batch_size:
        raise ValueError(f"{n_samples} samples cannot fill a batch of {batch_size}")
    epoch = 0
    while True:
        order = Xoshiro256(derive_seed(seed, "shuffle", epoch)).permutation(n_samples)
        for start in range(0, n_samples - batch_size + 1, batch_size):
            yield epoch, order[start : start + batch_size]
        epoch += 1


def steps_per_epoch(n_samples: int, batch_size: int) -> int:
    return n_samples // batch_size


def make_batch(samples: Sequence[StereoSample], indices, cfg: AugmentConfig, rng: Xoshiro256):
    augmented = [augment(samples[i], cfg, rng) for i in indices]
    left = Tensor(np.stack([s.left for s in augmented]))
    right = Tensor(np.stack([s.right for s in augmented]))
    return left, right


def compute_loss(net: NetConfig, params, left: Tensor, right: Tensor, weights: LossWeights):
    """Forward pass plus the multi-scale loss for one batch."""
    disparities = forward(net, params, left, right if net.input_mode == "stereo" else None)
    levels = len(disparities)
    total, breakdowns = total_loss(image_pyramid(left, levels), image_pyramid(right, levels), disparities, weights)
    return total, breakdowns, disparities


def log_columns(num_scales: int) -> list[str]:
    cols = ["step", "epoch", "lr", "c_total", "c_ap", "c_ds", "c_lr"]
    for term in ("c_total", "c_ap", "c_ds", "c_lr"):
        cols += [f"{term}_s{s}" for s in range(1, num_scales + 1)]
    return cols


def log_row(step: int, epoch: int, lr: float, breakdowns: Sequence[ScaleLossBreakdown]) -> dict:
    """Per-scale ``c_ap/c_ds/c_lr`` are the unweighted left+right sums;
    ``c_total`` is the weighted objective."""
    row = {"step": step, "epoch": epoch, "lr": lr}
    per = {"c_total": [], "c_ap": [], "c_ds": [], "c_lr": []}
    for b in breakdowns:
        v = b.values()
        per["c_total"].append(v["c_total"])
        per["c_ap"].append(v["c_ap_l"] + v["c_ap_r"])
        per["c_ds"].append(v["c_ds_l"] + v["c_ds_r"])
        per["c_lr"].append(v["c_lr_l"] + v["c_lr_r"])
    for term, values in per.items():
        row[term] = math.fsum(values)
        for s, value in enumerate(values, start=1):
            row[f"{term}_s{s}"] = value
    return row


@dataclass
class TrainResult:
    params: dict
    log: list[dict]
    net: NetConfig


def train(
    samples: Sequence[StereoSample],
    net: NetConfig,
    weights: LossWeights,
    cfg: TrainConfig,
    params: dict | None = None,
) -> TrainResult:
    """Optimise all scales jointly with Adam; deterministic given the seeds."""
    if not samples:
        raise ValueError("training set is empty")
    params = init(net) if params is None else params
    per_epoch = steps_per_epoch(len(samples), cfg.batch_size)
    total_epochs = math.ceil(cfg.steps / per_epoch)
    state = AdamState(lr=cfg.learning_rate)
    aug_rng = Xoshiro256(derive_seed(cfg.seed, "augment"))
    batches = batch_iterator(len(samples), cfg.batch_size, derive_seed(cfg.seed, "batches"))
    rows = []
    for step in range(cfg.steps):
        epoch, indices = next(batches)
        state.lr = schedule(epoch, cfg.learning_rate, total_epochs)
        left, right = make_batch(samples, indices, cfg.augment, aug_rng)
        for p in params.values():
            p.grad = None
        try:
            total, breakdowns, _ = compute_loss(net, params, left, right, weights)
            total.backward()
        except NonFiniteError as exc:
            raise TrainingDivergedError(step, "forward/backward", str(exc)) from exc
        row = log_row(step, epoch, state.lr, breakdowns)
        for b in breakdowns:
            for term, value in b.values().items():
                if not math.isfinite(value):
                    raise TrainingDivergedError(step, f"{term}@r={b.r:g}")
        grads = {name: p.grad for name, p in params.items()}
        for name, g in grads.items():
            if g is not None and not np.isfinite(g).all():
                raise TrainingDivergedError(step, f"gradient of {name}")
        adam_step(state, params, grads)
        rows.append(row)
        if step % 50 == 0 or step == cfg.steps - 1:
            log.info("step %d epoch %d lr %.2e loss %.5f", step, epoch, state.lr, row["c_total"])
    return TrainResult(params, rows, net)


def write_loss_log(path, rows: Sequence[dict], num_scales: int) -> None:
    cols = log_columns(num_scales)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(cols)
        for row in rows:
            writer.writerow([_fmt(row[c]) for c in cols])


def _fmt(value) -> str:
    return str(value) if isinstance(value, int) else format(value, ".17g")


def read_loss_log(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{k: float(v) for k, v in row.items()} for row in csv.DictReader(fh)]


def load_samples(manifest) -> list[StereoSample]:
    from .data.io import load_entry, read_manifest
    from .data.synthetic import CameraModel

    samples = []
    for entry in read_manifest(manifest):
        left, right, gt, mask = load_entry(entry)
        camera = CameraModel(entry.baseline or 0.54, entry.focal or float(left.shape[-1]))
        samples.append(StereoSample(left, right, gt, camera, valid_mask=mask))
    return samples

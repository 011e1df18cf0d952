"""Seeded gradient-check suite over the differentiable building blocks.

Each case builds a scalar closure from random inputs (a fixed random
projection turns tensor outputs into scalars). Sampling positions are kept
away from integer columns and disparities away from the clamp borders so the
finite differences never straddle a kink.
"""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor, grad_check
from .loss import (
    LossWeights,
    appearance_loss,
    lr_consistency_loss,
    smoothness_loss,
    ssim_map,
    total_loss,
)
from .model import NetConfig, forward, init
from .train import image_pyramid
from .warp import bilinear_sample, project_disparity

OP_TOLERANCE = 1e-4
END_TO_END_TOLERANCE = 1e-3


@dataclass(frozen=True)
class Case:
    module: str
    name: str
    build: Callable[[np.random.Generator], tuple[Callable[[], Tensor], list[Tensor]]]
    tolerance: float = OP_TOLERANCE
    max_elements: int | None = None
    step: float = 1e-5


@dataclass
class CaseResult:
    module: str
    name: str
    max_error: float
    tolerance: float
    instances: int
    seconds: float

    @property
    def passed(self) -> bool:
        return self.max_error <= self.tolerance


def _projected(out_fn, shape, rng):
    proj = Tensor(rng.uniform(-1.0, 1.0, shape))
    return lambda: dc.sum(out_fn() * proj)


def _off_integer(rng, shape, lo, hi):
    d = rng.uniform(lo, hi, shape)
    frac = d - np.floor(d)
    d[(frac < 0.05) | (frac > 0.95)] += 0.3
    return d


def _away_from_zero(rng, shape, scale=2.0):
    x = rng.uniform(-scale, scale, shape)
    x[np.abs(x) < 1e-2] = 0.5
    return x


def _conv(rng):
    x = Tensor(rng.uniform(-1, 1, (2, 2, 6, 6)))
    w = Tensor(rng.uniform(-1, 1, (3, 2, 3, 3)))
    b = Tensor(rng.uniform(-1, 1, 3))
    stride = int(rng.integers(1, 3))
    out = (6 + 2 - 3) // stride + 1
    return _projected(lambda: dc.conv2d(x, w, b, stride=stride, padding=1), (2, 3, out, out), rng), [x, w, b]


def _elu(rng):
    x = Tensor(_away_from_zero(rng, (2, 4, 5)))
    return _projected(lambda: dc.elu(x), x.shape, rng), [x]


def _sigmoid(rng):
    x = Tensor(rng.uniform(-3, 3, (2, 4, 5)))
    d_max = float(rng.uniform(1, 20))
    return _projected(lambda: dc.sigmoid_scaled(x, d_max), x.shape, rng), [x]


def _upsample(rng):
    x = Tensor(rng.uniform(-1, 1, (2, 3, 4)))
    return _projected(lambda: dc.upsample_nearest2x(x), (2, 6, 8), rng), [x]


def _avgpool(rng):
    x = Tensor(rng.uniform(-1, 1, (2, 6, 8)))
    return _projected(lambda: dc.avgpool2x(x), (2, 3, 4), rng), [x]


def _sampler(rng):
    src = Tensor(rng.uniform(0, 1, (2, 3, 8)))
    disp = Tensor(_off_integer(rng, (3, 8), 0.2, 3.5))
    sign = int(rng.choice([-1, 1]))
    return _projected(lambda: bilinear_sample(src, disp, sign), src.shape, rng), [src, disp]


def _project(rng):
    other = Tensor(rng.uniform(0, 3, (4, 8)))
    base = Tensor(_off_integer(rng, (4, 8), 0.2, 3.0))
    return _projected(lambda: project_disparity(other, base, -1), (4, 8), rng), [other, base]


def _ssim(rng):
    x = Tensor(rng.uniform(0.1, 0.9, (2, 5, 5)))
    y = Tensor(rng.uniform(0.1, 0.9, (2, 5, 5)))
    return _projected(lambda: ssim_map(x, y), (2, 3, 3), rng), [x, y]


def _appearance(rng):
    x = Tensor(rng.uniform(0.1, 0.9, (3, 5, 6)))
    y = Tensor(rng.uniform(0.1, 0.9, (3, 5, 6)))
    w = LossWeights()
    return (lambda: appearance_loss(x, y, w)), [x, y]


def _smoothness(rng):
    d = Tensor(rng.uniform(0, 4, (5, 6)))
    img = Tensor(rng.uniform(0, 1, (3, 5, 6)))
    return (lambda: smoothness_loss(d, img)), [d, img]


def _consistency(rng):
    d_l = Tensor(_off_integer(rng, (4, 7), 0.2, 3.0))
    d_r = Tensor(rng.uniform(0.2, 3.0, (4, 7)))
    return (lambda: lr_consistency_loss(d_l, d_r)), [d_l, d_r]


TINY_NET = dict(encoder_channels=(3, 4), num_scales=2, head_bias=0.0)


def _end_to_end(rng):
    net = NetConfig(seed=int(rng.integers(0, 2**31)), **TINY_NET)
    params = init(net)
    left = Tensor(rng.uniform(0, 1, (1, 3, 8, 16)))
    right = Tensor(rng.uniform(0, 1, (1, 3, 8, 16)))
    weights = LossWeights()

    def f():
        disps = forward(net, params, left)
        return total_loss(image_pyramid(left, 2), image_pyramid(right, 2), disps, weights)[0]

    return f, list(params.values())


CASES = [
    Case("diffcore", "conv2d", _conv),
    Case("diffcore", "elu", _elu),
    Case("diffcore", "sigmoid_scaled", _sigmoid),
    Case("diffcore", "upsample_nearest2x", _upsample),
    Case("diffcore", "avgpool2x", _avgpool),
    Case("warp", "bilinear_sample", _sampler),
    Case("warp", "project_disparity", _project),
    Case("loss", "ssim_map", _ssim),
    Case("loss", "appearance_loss", _appearance),
    Case("loss", "smoothness_loss", _smoothness),
    Case("loss", "lr_consistency_loss", _consistency),
    # a smaller step keeps the probe from straddling sampling-position kinks somewhere in the image
    Case("model", "end_to_end_tiny", _end_to_end, END_TO_END_TOLERANCE, max_elements=6, step=1e-6),
]

MODULES = ("diffcore", "warp", "loss", "model")


def run_case(case: Case, instances: int = 20, seed: int = 0) -> CaseResult:
    start = time.perf_counter()
    worst = 0.0
    for i in range(instances):
        rng = np.random.default_rng([seed, i, len(case.name)] + [ord(c) for c in case.name])
        closure, inputs = case.build(rng)
        err = grad_check(closure, inputs, step=case.step, max_elements=case.max_elements, seed=i)
        worst = max(worst, err)
    return CaseResult(case.module, case.name, worst, case.tolerance, instances, time.perf_counter() - start)


def run_suite(module: str = "all", instances: int = 20, seed: int = 0) -> list[CaseResult]:
    if module != "all" and module not in MODULES:
        raise ValueError(f"unknown module {module!r}; choose from all, {', '.join(MODULES)}")
    return [run_case(c, instances, seed) for c in CASES if module in ("all", c.module)]


def format_table(results) -> str:
    lines = [f"{'module':<10} {'case':<22} {'max rel err':>12} {'tolerance':>10}  status"]
    for r in results:
        lines.append(
            f"{r.module:<10} {r.name:<22} {r.max_error:>12.3e} {r.tolerance:>10.0e}  {'PASS' if r.passed else 'FAIL'}"
        )
    return "\n".join(lines)

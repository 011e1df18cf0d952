"""Layered synthetic stereo scenes with exact ground-truth disparity.

A scene is a textured background plane plus ``K`` fronto-parallel
rectangles, each at an integer disparity. Both views are composited back to
front. Every layer owns a texture defined on left-view coordinates; the right
view shows layer ``k`` at column ``j'`` with the texel from column
``j' + delta_k``. So for each pixel visible in both views
``right[i, j - delta] == left[i, j]`` holds exactly.

Two monocular cues make disparity inferable from the left view alone:
texture features grow with disparity (near surfaces look coarser), and far
surfaces are blended towards a haze colour.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..rng import Xoshiro256, derive_seed

HAZE_COLOR = np.array([0.55, 0.70, 0.95])
MATERIAL_COLOR = np.array([0.90, 0.55, 0.30])


@dataclass(frozen=True)
class CameraModel:
    baseline: float = 0.54
    focal: float = 64.0

    def __post_init__(self):
        if not (self.baseline > 0 and self.focal > 0):
            raise ValueError(f"baseline and focal must be positive, got {self.baseline}, {self.focal}")


@dataclass(frozen=True)
class Layer:
    x: int
    y: int
    width: int
    height: int
    disparity: int
    texture_seed: int


@dataclass(frozen=True)
class SceneSpec:
    seed: int
    height: int
    width: int
    background_disparity: int
    layers: tuple[Layer, ...] = ()
    background_texture_seed: int = 0

    def __post_init__(self):
        limit = 0.3 * self.width
        for d in [self.background_disparity] + [l.disparity for l in self.layers]:
            if not 0 <= d < limit:
                raise ValueError(f"disparity {d} outside [0, 0.3*W = {limit})")
        for l in self.layers:
            if l.width <= 0 or l.height <= 0 or l.x < 0 or l.y < 0 or l.x + l.width > self.width or l.y + l.height > self.height:
                raise ValueError(f"layer rectangle {l} outside the {self.width}x{self.height} image")
        if list(self.layers) != sorted(self.layers, key=lambda l: l.disparity):
            raise ValueError("layers must be sorted far to near (ascending disparity)")


@dataclass
class StereoSample:
    left: np.ndarray
    right: np.ndarray
    gt_disparity_left: np.ndarray | None = None
    camera: CameraModel = field(default_factory=CameraModel)
    gt_disparity_right: np.ndarray | None = None
    valid_mask: np.ndarray | None = None

    def __post_init__(self):
        if self.left.shape != self.right.shape:
            raise ValueError(f"left {self.left.shape} and right {self.right.shape} differ")


@dataclass
class SceneConfig:
    """Ranges used when drawing random scenes; disparities are fractions of W."""

    max_layers: int = 2
    background_disparity: tuple[float, float] = (0.08, 0.08)
    layer_disparity: tuple[float, float] = (0.12, 0.25)
    layer_width: tuple[float, float] = (0.2, 0.45)
    layer_height: tuple[float, float] = (0.3, 0.8)
    texture_scale: float = 1.5
    texture_min_period: float = 6.0
    octaves: int = 4
    contrast: float = 2.0
    haze: float = 0.9
    haze_falloff: float = 0.18
    material_jitter: float = 0.1
    shade_range: tuple[float, float] = (0.35, 1.0)


def random_scene_spec(seed: int, height: int, width: int, cfg: SceneConfig | None = None) -> SceneSpec:
    cfg = cfg or SceneConfig()
    rng = Xoshiro256(derive_seed(seed, "scene"))
    lo, hi = (max(1, round(f * width)) for f in cfg.background_disparity)
    bg = rng.randint(lo, hi)
    lo, hi = (max(bg + 1, round(f * width)) for f in cfg.layer_disparity)
    count = rng.randint(1, cfg.max_layers)
    layers = []
    for k in range(count):
        w = rng.randint(max(1, round(cfg.layer_width[0] * width)), max(1, round(cfg.layer_width[1] * width)))
        h = rng.randint(max(1, round(cfg.layer_height[0] * height)), max(1, round(cfg.layer_height[1] * height)))
        x = rng.randint(0, width - w)
        y = rng.randint(0, height - h)
        d = rng.randint(lo, hi)
        layers.append(Layer(x, y, w, h, d, derive_seed(seed, "layer", k)))
    layers.sort(key=lambda l: l.disparity)
    return SceneSpec(seed, height, width, bg, tuple(layers), derive_seed(seed, "background"))


def _value_noise(rng: Xoshiro256, height: int, width: int, period: float) -> np.ndarray:
    """Smooth noise in [0, 1]: random lattice, smoothstep-interpolated."""
    gh = int(np.ceil(height / period)) + 2
    gw = int(np.ceil(width / period)) + 2
    lattice = rng.random_array((gh, gw))
    ys = np.arange(height) / period
    xs = np.arange(width) / period
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    ty = ys - y0
    tx = xs - x0
    ty = ty * ty * (3 - 2 * ty)
    tx = tx * tx * (3 - 2 * tx)
    a = lattice[np.ix_(y0, x0)]
    b = lattice[np.ix_(y0, x0 + 1)]
    c = lattice[np.ix_(y0 + 1, x0)]
    d = lattice[np.ix_(y0 + 1, x0 + 1)]
    tx = tx[None, :]
    ty = ty[:, None]
    return (a * (1 - tx) + b * tx) * (1 - ty) + (c * (1 - tx) + d * tx) * ty


def layer_texture(texture_seed: int, disparity: int, height: int, width: int, image_width: int, cfg: SceneConfig) -> np.ndarray:
    """``3 x height x width`` texture on left-view columns [0, width).

    Multi-octave value noise: octave ``o`` has period ``base / 2**o`` and
    amplitude ``2**-o`` so coarse pyramid levels keep low-frequency structure.
    """
    rng = Xoshiro256(texture_seed)
    base = cfg.texture_min_period + cfg.texture_scale * disparity
    t = np.zeros((height, width))
    amplitude, norm, period = 1.0, 0.0, base
    for _ in range(cfg.octaves):
        phase = rng.randint(0, 31)
        t += amplitude * _value_noise(rng, height, width + phase, period)[:, phase:]
        norm += amplitude
        amplitude *= 0.5
        period = max(2.0, period / 2.0)
    t = t / norm
    # stretch to use the full [0, 1] range of the shading ramp
    t = np.clip((t - 0.5) * cfg.contrast + 0.5, 0.0, 1.0)
    tint = MATERIAL_COLOR + rng.uniform_array(-cfg.material_jitter, cfg.material_jitter, (3,))
    shade = cfg.shade_range[0] + (cfg.shade_range[1] - cfg.shade_range[0]) * t
    color = np.clip(tint, 0.0, 1.0)[:, None, None] * shade[None]
    haze = haze_amount(disparity, image_width, cfg)
    return (1 - haze) * color + haze * HAZE_COLOR[:, None, None]


def haze_amount(disparity: float, width: int, cfg: SceneConfig) -> float:
    """Fraction of haze colour mixed into a surface at this disparity."""
    return cfg.haze * float(np.exp(-cfg.haze_falloff * disparity * 64.0 / width))  # falloff is per pixel at W = 64


def _compose(spec: SceneSpec, cfg: SceneConfig):
    h, w = spec.height, spec.width
    pad = max([spec.background_disparity] + [l.disparity for l in spec.layers])
    textures = [layer_texture(spec.background_texture_seed, spec.background_disparity, h, w + pad, w, cfg)]
    textures += [layer_texture(l.texture_seed, l.disparity, h, w + pad, w, cfg) for l in spec.layers]
    disps = [spec.background_disparity] + [l.disparity for l in spec.layers]
    cols = np.arange(w)
    left = np.empty((3, h, w))
    right = np.empty((3, h, w))
    z_left = np.zeros((h, w), dtype=np.int64)
    z_right = np.zeros((h, w), dtype=np.int64)
    left[:] = textures[0][:, :, cols]
    right[:] = textures[0][:, :, cols + disps[0]]
    for k, layer in enumerate(spec.layers, start=1):
        rows = slice(layer.y, layer.y + layer.height)
        lcols = slice(layer.x, layer.x + layer.width)
        left[:, rows, lcols] = textures[k][:, rows, lcols]
        z_left[rows, lcols] = k
        # right view: layer occupies j' with j' + delta in [x, x + width)
        r0 = max(0, layer.x - layer.disparity)
        r1 = layer.x + layer.width - layer.disparity
        if r1 > r0:
            rc = np.arange(r0, r1)
            right[:, rows, r0:r1] = textures[k][:, rows][:, :, rc + layer.disparity]
            z_right[rows, r0:r1] = k
    return left, right, z_left, z_right, np.asarray(disps, dtype=np.float64)


def generate_scene(spec: SceneSpec, cfg: SceneConfig | None = None, camera: CameraModel | None = None) -> StereoSample:
    cfg = cfg or SceneConfig()
    left, right, z_left, z_right, disps = _compose(spec, cfg)
    sample = StereoSample(
        left=left,
        right=right,
        gt_disparity_left=disps[z_left],
        camera=camera or CameraModel(focal=float(spec.width)),
        gt_disparity_right=disps[z_right],
    )
    sample.valid_mask = _visibility(z_left, z_right, disps)
    return sample


def _visibility(z_left: np.ndarray, z_right: np.ndarray, disps: np.ndarray) -> np.ndarray:
    h, w = z_left.shape
    target = np.arange(w)[None, :] - disps[z_left].astype(np.int64)
    inside = target >= 0
    rows = np.arange(h)[:, None]
    seen = z_right[rows, np.clip(target, 0, w - 1)]
    return inside & (seen == z_left)


def occlusion_mask(spec: SceneSpec, cfg: SceneConfig | None = None) -> np.ndarray:
    """True for left pixels visible in both views (from the compositing z-buffers)."""
    _, _, z_left, z_right, disps = _compose(spec, cfg or SceneConfig())
    return _visibility(z_left, z_right, disps)


def generate_dataset(seed: int, count: int, height: int, width: int, cfg: SceneConfig | None = None):
    """Scene ``i`` is drawn from ``derive_seed(seed, "scene", i)``."""
    for i in range(count):
        spec = random_scene_spec(derive_seed(seed, "scene", i), height, width, cfg)
        yield spec, generate_scene(spec, cfg)

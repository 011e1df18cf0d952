"""Encoder-decoder disparity network with skip connections and multi-scale heads.

Layer layout for ``L = len(encoder_channels)`` levels (``k`` = kernel size)::

    encoder level l = 1..L   conv(k, stride 2) -> ELU -> conv(k, stride 1) -> ELU
    decoder level l = L..1   upsample x2 -> conv(k) -> ELU          ("upconv")
                             concat [upconv, encoder skip l-1, upsampled disp]
                             conv(k) -> ELU                          ("iconv")
                             head: conv(3) -> 2 channels -> scaled sigmoid

Decoder level ``l`` runs at ``input / 2**(l-1)``. Heads sit on the
``num_scales`` finest decoder levels; each head's two channels are the
left- and right-view disparities in pixels, bounded by
``d_max_ratio * width_at_that_level``. The previous (coarser) head output,
divided by its level width and upsampled, is fed into the next iconv.

Parameter count (``c_in`` input channels, ``e`` encoder, ``u`` decoder
channels, ``S`` = num_scales)::

    sum_l  k^2 e[l-1] e[l] + e[l] + k^2 e[l] e[l] + e[l]            encoder, e[0] = c_in
    sum_l  k^2 x_l u[l] + u[l]                                      upconv, x_L = e[L], x_l = u[l+1]
    sum_l  k^2 (u[l] + e[l-1]' + h_l) u[l] + u[l]                   iconv, e[0]' = 0, h_l = 2 if a coarser head exists
    sum_heads  9 * 2 u[l] + 2

:func:`parameter_count` evaluates this.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .diffcore import ShapeError, Tensor
from .rng import Xoshiro256, derive_seed


@dataclass
class NetConfig:
    input_mode: str = "mono"
    encoder_channels: tuple[int, ...] = (8, 16, 32, 64)
    decoder_channels: tuple[int, ...] | None = None
    kernel_size: int = 3
    num_scales: int = 4
    d_max_ratio: float = 0.3
    head_bias: float = -3.0  # start from small disparities, 0.3 W * sigmoid(-3) ~ 0.014 W
    seed: int = 0

    def __post_init__(self):
        self.encoder_channels = tuple(int(c) for c in self.encoder_channels)
        if self.decoder_channels is None:
            self.decoder_channels = tuple(self.encoder_channels)
        self.decoder_channels = tuple(int(c) for c in self.decoder_channels)
        if self.input_mode not in ("mono", "stereo"):
            raise ValueError(f"input_mode must be 'mono' or 'stereo', got {self.input_mode!r}")
        if len(self.encoder_channels) != len(self.decoder_channels):
            raise ValueError("encoder_channels and decoder_channels need equal length")
        if any(c <= 0 for c in self.encoder_channels + self.decoder_channels):
            raise ValueError("channel counts must be positive")
        if not 1 <= self.num_scales <= len(self.encoder_channels):
            raise ValueError(f"num_scales {self.num_scales} needs as many encoder levels, have {len(self.encoder_channels)}")
        if self.kernel_size % 2 != 1:
            raise ValueError("kernel_size must be odd")
        if not self.d_max_ratio > 0:
            raise ValueError("d_max_ratio must be positive")

    @property
    def in_channels(self) -> int:
        return 3 if self.input_mode == "mono" else 6

    @property
    def levels(self) -> int:
        return len(self.encoder_channels)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["encoder_channels"] = list(self.encoder_channels)
        d["decoder_channels"] = list(self.decoder_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> NetConfig:
        return cls(**d)


def parameter_shapes(cfg: NetConfig) -> dict[str, tuple[int, ...]]:
    """Names and shapes in declaration order."""
    k = cfg.kernel_size
    enc, dec, L = cfg.encoder_channels, cfg.decoder_channels, cfg.levels
    shapes: dict[str, tuple[int, ...]] = {}

    def conv(name, cin, cout, ksize=k):
        shapes[f"{name}.weight"] = (cout, cin, ksize, ksize)
        shapes[f"{name}.bias"] = (cout,)

    prev = cfg.in_channels
    for l in range(1, L + 1):
        conv(f"enc{l}a", prev, enc[l - 1])
        conv(f"enc{l}b", enc[l - 1], enc[l - 1])
        prev = enc[l - 1]
    for l in range(L, 0, -1):
        u = dec[l - 1]
        conv(f"upconv{l}", prev, u)
        skip = enc[l - 2] if l >= 2 else 0
        coarser_head = 2 if _has_head(cfg, l + 1) else 0
        conv(f"iconv{l}", u + skip + coarser_head, u)
        if _has_head(cfg, l):
            conv(f"disp{l}", u, 2, 3)
        prev = u
    return shapes


def _has_head(cfg: NetConfig, level: int) -> bool:
    return 1 <= level <= cfg.num_scales


def parameter_count(cfg: NetConfig) -> int:
    """Closed-form count, independent of :func:`parameter_shapes`."""
    k2 = cfg.kernel_size ** 2
    e = (cfg.in_channels,) + cfg.encoder_channels
    u = cfg.decoder_channels
    L = cfg.levels
    total = 0
    for l in range(1, L + 1):
        total += k2 * e[l - 1] * e[l] + e[l] + k2 * e[l] * e[l] + e[l]
    for l in range(1, L + 1):
        x = e[L] if l == L else u[l]
        total += k2 * x * u[l - 1] + u[l - 1]
        skip = e[l - 1] if l >= 2 else 0
        h = 2 if l + 1 <= cfg.num_scales else 0
        total += k2 * (u[l - 1] + skip + h) * u[l - 1] + u[l - 1]
        if l <= cfg.num_scales:
            total += 9 * 2 * u[l - 1] + 2
    return total


def init(cfg: NetConfig) -> dict[str, Tensor]:
    """Fan-in scaled uniform weights U(-sqrt(3/fan_in), sqrt(3/fan_in)), zero biases.

    Each parameter draws from its own stream ``derive_seed(seed, "init", name)``.
    """
    params = {}
    for name, shape in parameter_shapes(cfg).items():
        if name.endswith(".bias"):
            value = np.zeros(shape)
            if name.startswith("disp"):
                value += cfg.head_bias
        else:
            fan_in = shape[1] * shape[2] * shape[3]
            bound = math.sqrt(3.0 / fan_in)
            rng = Xoshiro256(derive_seed(cfg.seed, "init", name))
            value = rng.uniform_array(-bound, bound, shape)
        params[name] = Tensor(value, requires_grad=True)
    return params


def _conv(params, name, x, stride=1):
    w = params[f"{name}.weight"]
    pad = w.shape[-1] // 2
    return dc.conv2d(x, w, params[f"{name}.bias"], stride=stride, padding=pad)


def forward(cfg: NetConfig, params: dict[str, Tensor], left: Tensor, right: Tensor | None = None):
    """Disparity pyramid, finest level first: a list of ``(d_l, d_r)`` pairs.

    Images are ``[N x] 3 x H x W``; ``right`` is required in stereo mode and
    rejected in mono mode.
    """
    if cfg.input_mode == "mono":
        if right is not None:
            raise ValueError("mono model takes only the left image")
        x = left
    else:
        if right is None:
            raise ValueError("stereo model needs the right image")
        if right.shape != left.shape:
            raise ShapeError(f"stereo inputs disagree: {left.shape} vs {right.shape}")
        x = dc.concat_channels([left, right])
    if x.shape[-3] != cfg.in_channels:
        raise ShapeError(f"expected {cfg.in_channels} input channels, got {x.shape[-3]}")
    h, w = x.shape[-2:]
    factor = 2 ** cfg.levels
    if h % factor or w % factor:
        raise ShapeError(f"input {h}x{w} must be divisible by {factor}")

    skips = []
    for l in range(1, cfg.levels + 1):
        x = dc.elu(_conv(params, f"enc{l}a", x, stride=2))
        x = dc.elu(_conv(params, f"enc{l}b", x))
        skips.append(x)

    outputs = []
    prev_disp = None
    for l in range(cfg.levels, 0, -1):
        x = dc.elu(_conv(params, f"upconv{l}", dc.upsample_nearest2x(x)))
        parts = [x]
        if l >= 2:
            parts.append(skips[l - 2])
        if prev_disp is not None:
            parts.append(dc.upsample_nearest2x(prev_disp))
        x = dc.elu(_conv(params, f"iconv{l}", dc.concat_channels(parts) if len(parts) > 1 else x))
        if _has_head(cfg, l):
            width = x.shape[-1]
            d_max = cfg.d_max_ratio * width
            disp = dc.sigmoid_scaled(_conv(params, f"disp{l}", x), d_max)
            outputs.append((disp[..., 0, :, :], disp[..., 1, :, :]))
            prev_disp = disp * (1.0 / width)
    outputs.reverse()
    return outputs


# ------------------------------------------------------------------ checkpoints

MAGIC = b"STEREODEPTH-CKPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, cfg: NetConfig, params: dict[str, Tensor], dtype: str = "float64") -> None:
    """Binary layout (little-endian)::

        16 bytes  magic "STEREODEPTH-CKPT"
        u32       format version
        u32       length of the config JSON
        bytes     config JSON (UTF-8, sorted keys)
        u8        bytes per value (4 or 8)
        u64       total number of values
        values    parameters concatenated in declaration order, C order
    """
    if dtype not in ("float32", "float64"):
        raise ValueError(f"dtype must be float32 or float64, got {dtype}")
    width = 4 if dtype == "float32" else 8
    blob = json.dumps(cfg.to_dict(), sort_keys=True).encode("utf-8")
    names = list(parameter_shapes(cfg))
    flat = np.concatenate([params[n].data.reshape(-1) for n in names]).astype(f"<f{width}")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<BQ", width, flat.size))
        fh.write(flat.tobytes())


def load_checkpoint(path) -> tuple[NetConfig, dict[str, Tensor]]:
    raw = Path(path).read_bytes()
    if not raw.startswith(MAGIC):
        raise CheckpointError(f"{path}: bad magic")
    pos = len(MAGIC)
    try:
        version, n = struct.unpack_from("<II", raw, pos)
        pos += 8
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported version {version}")
        cfg = NetConfig.from_dict(json.loads(raw[pos : pos + n].decode("utf-8")))
        pos += n
        width, count = struct.unpack_from("<BQ", raw, pos)
        pos += 9
    except struct.error as exc:
        raise CheckpointError(f"{path}: truncated header") from exc
    if width not in (4, 8):
        raise CheckpointError(f"{path}: bad value width {width}")
    shapes = parameter_shapes(cfg)
    expected = sum(int(np.prod(s)) for s in shapes.values())
    if count != expected:
        raise CheckpointError(f"{path}: {count} values, config needs {expected}")
    if len(raw) - pos != count * width:
        raise CheckpointError(f"{path}: payload has {len(raw) - pos} bytes, expected {count * width}")
    flat = np.frombuffer(raw, dtype=f"<f{width}", count=count, offset=pos).astype(np.float64)
    params, off = {}, 0
    for name, shape in shapes.items():
        size = int(np.prod(shape))
        params[name] = Tensor(flat[off : off + size].reshape(shape), requires_grad=True)
        off += size
    return cfg, params

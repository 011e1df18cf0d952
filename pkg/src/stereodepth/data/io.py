"""PPM / PFM readers and writers and JSON-lines manifests."""
from __future__ import annotations

import json
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np


class FormatError(ValueError):
    """Malformed file header."""


class TruncatedError(FormatError):
    """Payload shorter than the header promises."""


class DimensionMismatchError(ValueError):
    """Paired files disagree in size."""


class ManifestError(ValueError):
    pass


_TOKEN = re.compile(rb"\s*(#[^\n]*\n\s*)*(\S+)")


def _header_tokens(raw: bytes, count: int) -> tuple[list[bytes], int]:
    tokens, pos = [], 0
    for _ in range(count):
        m = _TOKEN.match(raw, pos)
        if m is None:
            raise FormatError("header ended early")
        tokens.append(m.group(2))
        pos = m.end()
    return tokens, pos


def write_ppm(path, image: np.ndarray) -> None:
    """Binary P6, maxval 255. ``image`` is ``3 x H x W`` in [0, 1]."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3 or img.shape[0] != 3:
        raise ValueError(f"write_ppm expects 3 x H x W, got {img.shape}")
    _, h, w = img.shape
    q = np.floor(np.clip(img, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(q.transpose(1, 2, 0).tobytes())


def read_ppm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    try:
        tokens, pos = _header_tokens(raw, 4)
    except FormatError as exc:
        raise FormatError(f"{path}: {exc}") from None
    if tokens[0] != b"P6":
        raise FormatError(f"{path}: not a binary PPM (magic {tokens[0]!r})")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise FormatError(f"{path}: non-integer header field") from None
    if w <= 0 or h <= 0 or not 0 < maxval < 256:
        raise FormatError(f"{path}: unsupported header {w}x{h} maxval {maxval}")
    pos += 1  # single whitespace byte ends the header
    need = w * h * 3
    payload = raw[pos : pos + need]
    if len(payload) < need:
        raise TruncatedError(f"{path}: {len(payload)} of {need} payload bytes")
    arr = np.frombuffer(payload, dtype=np.uint8).reshape(h, w, 3).transpose(2, 0, 1)
    return arr.astype(np.float64) / maxval


def write_pfm(path, disparity: np.ndarray) -> None:
    """Greyscale PFM: ``Pf``, width height, ``-1.0`` (little-endian), rows bottom to top."""
    d = np.asarray(disparity)
    if d.ndim != 2:
        raise ValueError(f"write_pfm expects H x W, got {d.shape}")
    h, w = d.shape
    with open(path, "wb") as fh:
        fh.write(f"Pf\n{w} {h}\n-1.0\n".encode("ascii"))
        fh.write(np.ascontiguousarray(d[::-1], dtype="<f4").tobytes())


def read_pfm(path) -> np.ndarray:
    """Returns ``H x W`` float32, top row first."""
    raw = Path(path).read_bytes()
    try:
        tokens, pos = _header_tokens(raw, 4)
    except FormatError as exc:
        raise FormatError(f"{path}: {exc}") from None
    if tokens[0] != b"Pf":
        raise FormatError(f"{path}: not a greyscale PFM (magic {tokens[0]!r})")
    try:
        w, h = int(tokens[1]), int(tokens[2])
        scale = float(tokens[3])
    except ValueError:
        raise FormatError(f"{path}: malformed header") from None
    if w <= 0 or h <= 0 or scale == 0:
        raise FormatError(f"{path}: bad dimensions or scale")
    pos += 1
    dtype = "<f4" if scale < 0 else ">f4"
    need = w * h * 4
    payload = raw[pos : pos + need]
    if len(payload) < need:
        raise TruncatedError(f"{path}: {len(payload)} of {need} payload bytes")
    return np.frombuffer(payload, dtype=dtype).reshape(h, w)[::-1].astype(np.float32)


@dataclass
class ManifestEntry:
    left: Path
    right: Path
    gt_disparity: Path | None = None
    valid_mask: Path | None = None
    baseline: float | None = None
    focal: float | None = None
    line: int = 0

    @property
    def image_id(self) -> str:
        return self.left.stem


def read_manifest(path) -> list[ManifestEntry]:
    """One JSON object per line: ``left``, ``right`` and optional
    ``gt_disparity``, ``valid_mask``, ``baseline``, ``focal``.

    Relative paths resolve against the manifest's directory.
    """
    path = Path(path)
    base = path.parent
    entries = []
    for lineno, text in enumerate(path.read_text().splitlines(), start=1):
        if not text.strip():
            continue
        try:
            obj = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ManifestError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None
        for key in ("left", "right"):
            if key not in obj:
                raise ManifestError(f"{path}:{lineno}: missing field {key!r}")
        files = {}
        for key in ("left", "right", "gt_disparity", "valid_mask"):
            if obj.get(key) is None:
                continue
            p = Path(obj[key])
            p = p if p.is_absolute() else base / p
            if not p.is_file():
                raise ManifestError(f"{path}:{lineno}: {key} file not found: {p}")
            files[key] = p
        entries.append(
            ManifestEntry(
                left=files["left"],
                right=files["right"],
                gt_disparity=files.get("gt_disparity"),
                valid_mask=files.get("valid_mask"),
                baseline=obj.get("baseline"),
                focal=obj.get("focal"),
                line=lineno,
            )
        )
    if not entries:
        raise ManifestError(f"{path}: manifest is empty")
    return entries


def load_entry(entry: ManifestEntry):
    """Read the images (and optional maps) of one manifest entry, checking sizes."""
    left = read_ppm(entry.left)
    right = read_ppm(entry.right)
    if left.shape != right.shape:
        raise DimensionMismatchError(f"line {entry.line}: left {left.shape[1:]} vs right {right.shape[1:]}")
    gt = mask = None
    if entry.gt_disparity is not None:
        gt = read_pfm(entry.gt_disparity).astype(np.float64)
        if gt.shape != left.shape[1:]:
            raise DimensionMismatchError(f"line {entry.line}: disparity {gt.shape} vs image {left.shape[1:]}")
    if entry.valid_mask is not None:
        mask = read_pfm(entry.valid_mask) > 0.5
        if mask.shape != left.shape[1:]:
            raise DimensionMismatchError(f"line {entry.line}: mask {mask.shape} vs image {left.shape[1:]}")
    return left, right, gt, mask

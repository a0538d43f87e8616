"""Image containers, PNG I/O, color/bit conversions, resizing, and RL state construction.

Images are channel-major numpy arrays. ``FloatImage`` carries float data
nominally in [0, 1]; ``QuantizedImage`` carries integer levels for a given bit
depth. Grayscale PNGs are promoted to 3 channels on load and alpha channels
are dropped, so the rest of the pipeline can assume C in {1, 3} and usually 3.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

SUPPORTED_BIT_DEPTHS = (8, 10, 12, 16)


class ImagingError(Exception):
    """Base class for image I/O and container errors."""


class MissingFileError(ImagingError):
    """The referenced image file does not exist."""


class UnsupportedColorError(ImagingError):
    """The PNG color type / bit depth is not supported."""


class DecodeError(ImagingError):
    """The stream is not a decodable PNG (corrupt header, truncated data, ...)."""


def _check_chw(data: np.ndarray, kinds, what: str) -> None:
    if data.ndim != 3:
        raise ValueError(f"{what} data must be (C, H, W), got shape {data.shape}")
    if data.dtype.kind not in kinds:
        raise ValueError(f"{what} data has dtype {data.dtype}, expected kind in {kinds}")


@dataclass(frozen=True, eq=False)
class FloatImage:
    """Channel-major float image, values nominally in [0, 1]."""

    data: np.ndarray

    def __post_init__(self):
        _check_chw(self.data, "f", "FloatImage")

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]


@dataclass(frozen=True, eq=False)
class QuantizedImage:
    """Channel-major integer image with levels in [0, 2^bit_depth - 1]."""

    data: np.ndarray
    bit_depth: int = 8

    def __post_init__(self):
        _check_chw(self.data, "u", "QuantizedImage")
        if self.bit_depth not in SUPPORTED_BIT_DEPTHS:
            raise ValueError(f"unsupported bit depth {self.bit_depth}, expected one of {SUPPORTED_BIT_DEPTHS}")

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]


@dataclass(frozen=True, eq=False)
class ImageState:
    """RL observation: downsampled current image x and temporal difference v.

    The combined tensor stacks x first, then v, for 2C channels total.
    """

    x: FloatImage
    v: FloatImage

    def __post_init__(self):
        if self.x.data.shape != self.v.data.shape:
            raise ValueError(f"state shapes differ: x {self.x.data.shape} vs v {self.v.data.shape}")

    @property
    def channels(self) -> int:
        return 2 * self.x.channels

    def combined(self) -> np.ndarray:
        """Return the (2C, h, w) observation tensor."""
        return np.concatenate([self.x.data, self.v.data], axis=0)


# ---------------------------------------------------------------------------
# Quantization lattice


def level_count(bit_depth: int) -> int:
    if bit_depth not in SUPPORTED_BIT_DEPTHS:
        raise ValueError(f"unsupported bit depth {bit_depth}, expected one of {SUPPORTED_BIT_DEPTHS}")
    return 1 << bit_depth


def _level_dtype(bit_depth: int):
    return np.uint8 if bit_depth == 8 else np.uint16


def quantize_levels(values: np.ndarray, bit_depth: int = 8) -> np.ndarray:
    """Map normalized values to integer levels.

    Rounding is half-away-from-zero of v * (2^b - 1), clamped to the valid
    level range. Computed in float64 so the result depends only on the input
    values, not their dtype.
    """
    peak = level_count(bit_depth) - 1
    scaled = np.floor(np.asarray(values, dtype=np.float64) * peak + 0.5)
    return np.clip(scaled, 0, peak).astype(_level_dtype(bit_depth))


def dequantize_levels(levels: np.ndarray, bit_depth: int = 8, dtype=np.float32) -> np.ndarray:
    """Integer levels -> normalized floats i / (2^b - 1), in a fixed dtype."""
    peak = dtype(level_count(bit_depth) - 1)
    return levels.astype(dtype) / peak


def to_float(image: QuantizedImage, dtype=np.float32) -> FloatImage:
    return FloatImage(dequantize_levels(image.data, image.bit_depth, dtype))


def quantize(image: FloatImage, bit_depth: int = 8) -> QuantizedImage:
    return QuantizedImage(quantize_levels(image.data, bit_depth), bit_depth)


# ---------------------------------------------------------------------------
# PNG I/O (8-bit)

_GRAY_MODES = {"L": None, "LA": None}
_COLOR_MODES = {"RGB": None, "RGBA": None}


def load_image(path) -> QuantizedImage:
    """Load an 8-bit PNG as a channel-major QuantizedImage.

    Grayscale is promoted to 3 channels by replication; alpha is dropped.
    """
    path = Path(path)
    if not path.exists():
        raise MissingFileError(f"image file not found: {path}")
    try:
        with Image.open(path) as img:
            if img.format != "PNG":
                raise DecodeError(f"{path}: expected PNG, got {img.format or 'unknown format'}")
            mode = img.mode
            if mode not in _GRAY_MODES and mode not in _COLOR_MODES:
                raise UnsupportedColorError(f"{path}: unsupported PNG mode {mode!r} (need 8-bit gray or RGB)")
            if mode in ("LA", "RGBA"):  # drop alpha
                img = img.convert(mode[:-1])
            arr = np.asarray(img, dtype=np.uint8)
    except UnidentifiedImageError as exc:
        raise DecodeError(f"{path}: not a decodable image: {exc}") from exc
    except (OSError, SyntaxError) as exc:
        raise DecodeError(f"{path}: PNG decode failed: {exc}") from exc

    if arr.ndim == 2:  # grayscale -> replicate to 3 channels
        arr = np.repeat(arr[None, :, :], 3, axis=0)
    else:
        arr = np.ascontiguousarray(arr.transpose(2, 0, 1))
    return QuantizedImage(arr, 8)


def save_image(path, image: QuantizedImage) -> None:
    """Write an 8-bit PNG (RGB for 3 channels, grayscale for 1)."""
    if image.bit_depth != 8:
        raise ValueError(f"PNG output is 8-bit only, got bit depth {image.bit_depth}")
    if image.channels == 3:
        pil = Image.fromarray(image.data.transpose(1, 2, 0), mode="RGB")
    elif image.channels == 1:
        pil = Image.fromarray(image.data[0], mode="L")
    else:
        raise ValueError(f"cannot encode {image.channels}-channel image as PNG")
    pil.save(Path(path), format="PNG")


# ---------------------------------------------------------------------------
# Resampling


def _area_spans(n_in: int, n_out: int):
    """Coverage spans for exact area averaging: (start index, weight vector) per output cell."""
    scale = n_in / n_out
    spans = []
    for i in range(n_out):
        a = i * scale
        b = (i + 1) * scale
        j0 = int(np.floor(a))
        j1 = min(int(np.ceil(b)), n_in)
        w = np.empty(j1 - j0, dtype=np.float64)
        for k, j in enumerate(range(j0, j1)):
            w[k] = min(b, j + 1) - max(a, j)
        spans.append((j0, w / (b - a)))
    return spans


def downsample(image: FloatImage, out_h: int, out_w: int) -> FloatImage:
    """Area-average resampling: each output pixel is the mean of its covering rectangle."""
    if out_h < 1 or out_w < 1:
        raise ValueError(f"target size must be positive, got {out_h}x{out_w}")
    data = image.data.astype(np.float64, copy=False)
    c, h, w = data.shape

    rows = np.empty((c, out_h, w), dtype=np.float64)
    for i, (j0, wts) in enumerate(_area_spans(h, out_h)):
        rows[:, i, :] = np.tensordot(wts, data[:, j0:j0 + len(wts), :], axes=(0, 1))
    out = np.empty((c, out_h, out_w), dtype=np.float64)
    for i, (j0, wts) in enumerate(_area_spans(w, out_w)):
        out[:, :, i] = np.tensordot(rows[:, :, j0:j0 + len(wts)], wts, axes=(2, 0))
    return FloatImage(out.astype(image.data.dtype))


def bilinear_resize(image: FloatImage, out_h: int, out_w: int) -> FloatImage:
    """Bilinear resampling with half-pixel-centered sampling."""
    if out_h < 1 or out_w < 1:
        raise ValueError(f"target size must be positive, got {out_h}x{out_w}")
    data = image.data.astype(np.float64, copy=False)
    _, h, w = data.shape

    def axis_coords(n_in, n_out):
        pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        pos = np.clip(pos, 0.0, n_in - 1.0)
        lo = np.floor(pos).astype(np.intp)
        hi = np.minimum(lo + 1, n_in - 1)
        frac = pos - lo
        return lo, hi, frac

    ylo, yhi, fy = axis_coords(h, out_h)
    xlo, xhi, fx = axis_coords(w, out_w)
    top = data[:, ylo, :] * (1.0 - fy)[None, :, None] + data[:, yhi, :] * fy[None, :, None]
    out = top[:, :, xlo] * (1.0 - fx)[None, None, :] + top[:, :, xhi] * fx[None, None, :]
    return FloatImage(out.astype(image.data.dtype))


def center_crop(image: FloatImage, out_h: int, out_w: int) -> FloatImage:
    """Spatially centered crop; images smaller than the target are bilinearly upscaled first."""
    if out_h < 1 or out_w < 1:
        raise ValueError(f"target size must be positive, got {out_h}x{out_w}")
    _, h, w = image.data.shape
    if h < out_h or w < out_w:
        factor = max(out_h / h, out_w / w)
        image = bilinear_resize(image, max(out_h, round(h * factor)), max(out_w, round(w * factor)))
        _, h, w = image.data.shape
    top = (h - out_h) // 2
    left = (w - out_w) // 2
    return FloatImage(np.ascontiguousarray(image.data[:, top:top + out_h, left:left + out_w]))


def build_state(x_t: FloatImage, x_prev: FloatImage | None = None) -> ImageState:
    """Build the RL observation from the current (and optionally previous) small image."""
    if x_prev is None:
        v = np.zeros_like(x_t.data)
    else:
        if x_prev.data.shape != x_t.data.shape:
            raise ValueError(f"shape mismatch: x_t {x_t.data.shape} vs x_prev {x_prev.data.shape}")
        v = x_t.data - x_prev.data
    return ImageState(x=x_t, v=FloatImage(v))


# ---------------------------------------------------------------------------
# Dataset manifest


@dataclass(frozen=True)
class ManifestEntry:
    path: Path
    classes: tuple[str, ...] = ()
    gt: Path | None = field(default=None)


def load_manifest(path) -> list[ManifestEntry]:
    """Read a JSON manifest: array of {"path": str, "classes": [str], "gt": str}.

    ``classes`` and ``gt`` are optional. Relative paths resolve against the
    manifest's directory.
    """
    path = Path(path)
    if not path.exists():
        raise MissingFileError(f"manifest not found: {path}")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ValueError(f"{path}: invalid JSON: {exc}") from exc
    if not isinstance(raw, list):
        raise ValueError(f"{path}: manifest must be a JSON array of records")

    base = path.parent
    entries = []
    for i, rec in enumerate(raw):
        if not isinstance(rec, dict) or "path" not in rec:
            raise ValueError(f"{path}: record {i} must be an object with a 'path' field")
        classes = rec.get("classes", [])
        if not isinstance(classes, list) or not all(isinstance(c, str) for c in classes):
            raise ValueError(f"{path}: record {i}: 'classes' must be a list of strings")
        gt = rec.get("gt")
        entries.append(ManifestEntry(
            path=base / rec["path"],
            classes=tuple(classes),
            gt=(base / gt) if gt is not None else None,
        ))
    return entries

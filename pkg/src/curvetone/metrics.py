"""Full-reference image quality metrics.

PSNR on unit dynamic range over all channels; single-scale SSIM on
channel-mean luminance with an 11x11 Gaussian window (sigma 1.5),
C1 = 0.01^2, C2 = 0.03^2, averaged over fully-interior windows.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate1d

from .imaging import FloatImage

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
_C1 = 0.01**2
_C2 = 0.03**2


def _require_same_shape(a: FloatImage, b: FloatImage) -> None:
    if a.data.shape != b.data.shape:
        raise ValueError(f"shape mismatch: {a.data.shape} vs {b.data.shape}")


def psnr(a: FloatImage, b: FloatImage) -> float:
    """10*log10(1/MSE) in decibels; identical images report +inf."""
    _require_same_shape(a, b)
    diff = a.data.astype(np.float64) - b.data.astype(np.float64)
    mse = float(np.mean(diff * diff))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def _gaussian_window(n: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    offsets = np.arange(n, dtype=np.float64) - (n - 1) / 2.0
    w = np.exp(-(offsets**2) / (2.0 * sigma**2))
    return w / w.sum()


def _windowed_mean(img: np.ndarray, window: np.ndarray) -> np.ndarray:
    half = len(window) // 2
    out = correlate1d(img, window, axis=0, mode="constant")
    out = correlate1d(out, window, axis=1, mode="constant")
    return out[half:-half, half:-half]  # interior windows only


def ssim(a: FloatImage, b: FloatImage) -> float:
    """Mean structural similarity over interior windows of the luminance plane."""
    _require_same_shape(a, b)
    if a.height < SSIM_WINDOW or a.width < SSIM_WINDOW:
        raise ValueError(f"images smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window: {a.height}x{a.width}")
    x = a.data.astype(np.float64).mean(axis=0)
    y = b.data.astype(np.float64).mean(axis=0)
    window = _gaussian_window()

    mu_x = _windowed_mean(x, window)
    mu_y = _windowed_mean(y, window)
    xx = _windowed_mean(x * x, window) - mu_x * mu_x
    yy = _windowed_mean(y * y, window) - mu_y * mu_y
    xy = _windowed_mean(x * y, window) - mu_x * mu_y

    numerator = (2.0 * mu_x * mu_y + _C1) * (2.0 * xy + _C2)
    denominator = (mu_x**2 + mu_y**2 + _C1) * (xx + yy + _C2)
    return float(np.mean(numerator / denominator))


@dataclass(frozen=True)
class MetricReport:
    """Per-image scores plus their arithmetic means."""

    paths: tuple[str, ...]
    psnr_values: tuple[float, ...]
    ssim_values: tuple[float, ...]

    @property
    def mean_psnr(self) -> float:
        return float(np.mean(self.psnr_values))

    @property
    def mean_ssim(self) -> float:
        return float(np.mean(self.ssim_values))

    def csv_rows(self):
        """Rows of (path, psnr_db, ssim) followed by the aggregate line."""
        for path, p, s in zip(self.paths, self.psnr_values, self.ssim_values):
            yield path, p, s
        yield "mean", self.mean_psnr, self.mean_ssim

"""PSNR and SSIM."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError

PSNR_INF = math.inf


@dataclass(frozen=True)
class QualityScore:
    psnr: float
    ssim: float

    def psnr_text(self) -> str:
        return "inf" if math.isinf(self.psnr) else f"{self.psnr:.4f}"


def _pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ConfigError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b, peak: float = 1.0) -> float:
    """10 log10(peak^2 / MSE) over all channels; identical images give ``inf``."""
    a, b = _pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_INF
    return 10.0 * math.log10(peak * peak / mse)


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2
    g = np.exp(-(x * x) / (2 * sigma * sigma))
    g /= g.sum()
    return g


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    rows = np.tensordot(sliding_window_view(img, len(g), axis=0), g, axes=([2], [0]))
    return np.tensordot(sliding_window_view(rows, len(g), axis=1), g, axes=([2], [0]))


def ssim_map(a: np.ndarray, b: np.ndarray, data_range: float = 1.0, k1: float = 0.01, k2: float = 0.03, win: int = 11, sigma: float = 1.5) -> np.ndarray:
    """Local SSIM over all fully-contained windows of a 2-d image pair."""
    if min(a.shape) < win:
        raise ConfigError(f"image {a.shape} smaller than the {win}x{win} SSIM window")
    g = gaussian_window(win, sigma)
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    mu_a = _filter_valid(a, g)
    mu_b = _filter_valid(b, g)
    var_a = _filter_valid(a * a, g) - mu_a * mu_a
    var_b = _filter_valid(b * b, g) - mu_b * mu_b
    cov = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return num / den


def ssim(a, b, data_range: float = 1.0) -> float:
    """Mean SSIM; (c, h, w) inputs are scored per channel and averaged."""
    a, b = _pair(a, b)
    if a.ndim == 4:
        a, b = a.reshape(-1, *a.shape[-2:]), b.reshape(-1, *b.shape[-2:])
    if a.ndim == 2:
        return float(ssim_map(a, b, data_range).mean())
    return float(np.mean([ssim_map(x, y, data_range).mean() for x, y in zip(a, b)]))


def quality(pred, target, peak: float = 1.0) -> QualityScore:
    return QualityScore(psnr(pred, target, peak), ssim(pred, target, peak))

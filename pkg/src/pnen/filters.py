"""Classical smoothing filters used as training targets.

All filters take a single image shaped (c, h, w) or (h, w), work per
channel with replicate-edge boundaries, and return float64 arrays.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError

FILTER_KINDS = ("gaussian", "median", "weighted_median")


@dataclass(frozen=True)
class FilterSpec:
    kind: str = "gaussian"
    radius: int = 2
    sigma: float = 1.5
    sigma_spatial: float = 2.0
    sigma_range: float = 0.2

    def __post_init__(self):
        if self.kind not in FILTER_KINDS:
            raise ConfigError(f"unknown filter kind {self.kind!r}")
        if self.radius < 1:
            raise ConfigError("filter radius must be >= 1")
        if min(self.sigma, self.sigma_spatial, self.sigma_range) <= 0:
            raise ConfigError("filter sigmas must be positive")


def _as_chw(img) -> tuple[np.ndarray, bool]:
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim == 2:
        return arr[None], True
    if arr.ndim == 4 and arr.shape[0] == 1:
        arr = arr[0]
    if arr.ndim != 3:
        raise ConfigError(f"expected a single (c, h, w) image, got shape {arr.shape}")
    return arr, False


def gaussian_kernel1d(sigma: float) -> np.ndarray:
    r = max(1, math.ceil(3 * sigma))
    x = np.arange(-r, r + 1, dtype=np.float64)
    k = np.exp(-(x * x) / (2 * sigma * sigma))
    return k / k.sum()


def gaussian_blur(img, spec: FilterSpec | float) -> np.ndarray:
    """Separable Gaussian, truncated at 3 sigma, replicate boundary."""
    sigma = spec.sigma if isinstance(spec, FilterSpec) else float(spec)
    arr, squeeze = _as_chw(img)
    k = gaussian_kernel1d(sigma)
    r = len(k) // 2
    tmp = np.pad(arr, ((0, 0), (r, r), (0, 0)), mode="edge")
    tmp = np.tensordot(sliding_window_view(tmp, len(k), axis=1), k, axes=([3], [0]))
    tmp = np.pad(tmp, ((0, 0), (0, 0), (r, r)), mode="edge")
    out = np.tensordot(sliding_window_view(tmp, len(k), axis=2), k, axes=([3], [0]))
    return out[0] if squeeze else out


def _windows(arr: np.ndarray, r: int) -> np.ndarray:
    # (c, h, w, 2r+1, 2r+1)
    padded = np.pad(arr, ((0, 0), (r, r), (r, r)), mode="edge")
    return sliding_window_view(padded, (2 * r + 1, 2 * r + 1), axis=(1, 2))


def median_filter(img, spec: FilterSpec) -> np.ndarray:
    """Windowed median; the lower median is taken for even counts."""
    arr, squeeze = _as_chw(img)
    r = spec.radius
    win = _windows(arr, r).reshape(*arr.shape, -1)
    k = win.shape[-1]
    out = np.partition(win, (k - 1) // 2, axis=-1)[..., (k - 1) // 2]
    return out[0] if squeeze else out


def weighted_median(img, spec: FilterSpec) -> np.ndarray:
    """Bilateral-weighted median: smallest value whose cumulative weight reaches half the total."""
    arr, squeeze = _as_chw(img)
    r = spec.radius
    win = _windows(arr, r).reshape(*arr.shape, -1)
    dy, dx = np.mgrid[-r : r + 1, -r : r + 1]
    spatial = np.exp(-(dy * dy + dx * dx).ravel() / (2 * spec.sigma_spatial**2))
    diff = win - arr[..., None]
    weights = spatial * np.exp(-(diff * diff) / (2 * spec.sigma_range**2))
    order = np.argsort(win, axis=-1, kind="stable")
    vals = np.take_along_axis(win, order, axis=-1)
    cum = np.cumsum(np.take_along_axis(weights, order, axis=-1), axis=-1)
    half = cum[..., -1:] / 2
    idx = np.argmax(cum >= half, axis=-1)
    out = np.take_along_axis(vals, idx[..., None], axis=-1)[..., 0]
    return out[0] if squeeze else out


def apply_filter(img, spec: FilterSpec) -> np.ndarray:
    if spec.kind == "gaussian":
        return gaussian_blur(img, spec)
    if spec.kind == "median":
        return median_filter(img, spec)
    return weighted_median(img, spec)

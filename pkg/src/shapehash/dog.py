"""Difference-of-Gaussians filtering via separable convolution.

Gaussian kernels are sampled on integer offsets, truncated at three standard
deviations, and normalized to unit sum.  Convolution uses symmetric
(edge-repeating) reflection at the borders.  The DoG inner scale is fixed at
half the outer scale; responses are rectified into a center-on and a
center-off polarity.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .imaging import validate_image

POLARITIES = ("on", "off")

INNER_SIGMA_RATIO = 0.5


@dataclass(frozen=True)
class DogParams:
    """Outer Gaussian scale and rectification polarity of one DoG filter."""

    sigma_outer: float
    polarity: str

    def __post_init__(self) -> None:
        if self.sigma_outer <= 0:
            raise ValueError("sigma_outer must be positive")
        if self.polarity not in POLARITIES:
            raise ValueError(f"polarity must be one of {POLARITIES}")


def gaussian_kernel_1d(sigma: float) -> np.ndarray:
    """Unit-sum 1-D Gaussian sampled on [-ceil(3*sigma), +ceil(3*sigma)]."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    radius = math.ceil(3.0 * sigma)
    offsets = np.arange(-radius, radius + 1, dtype=np.float64)
    kernel = np.exp(-(offsets * offsets) / (2.0 * sigma * sigma))
    return kernel / kernel.sum()


def _reflect_indices(n: int, pad: int) -> np.ndarray:
    # Symmetric reflection with edge repetition: ..., a, a, b, c, ..., z, z, ...
    idx = np.mod(np.arange(-pad, n + pad), 2 * n)
    return np.where(idx >= n, 2 * n - 1 - idx, idx)


def convolve1d_reflect(arr: np.ndarray, kernel: np.ndarray, axis: int) -> np.ndarray:
    """Convolve one axis with an odd-length kernel, reflecting at the border."""
    kernel = np.asarray(kernel, dtype=np.float64)
    if kernel.ndim != 1 or kernel.size % 2 == 0:
        raise ValueError("kernel must be 1-D with odd length")
    pad = kernel.size // 2
    if pad == 0:
        return arr * kernel[0]
    idx = _reflect_indices(arr.shape[axis], pad)
    padded = np.take(arr, idx, axis=axis)
    windows = sliding_window_view(padded, kernel.size, axis=axis)
    return windows @ kernel


def convolve_separable(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Apply a 1-D kernel along rows then columns of a 2-D array."""
    out = convolve1d_reflect(img, kernel, axis=0)
    return convolve1d_reflect(out, kernel, axis=1)


def gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    """Isotropic Gaussian blur by separable convolution."""
    return convolve_separable(img, gaussian_kernel_1d(sigma))


def dog_response_map(img: np.ndarray, params: DogParams) -> np.ndarray:
    """Rectified difference of Gaussians at one scale and polarity.

    The raw response is the inner blur (std ``sigma_outer / 2``) minus the
    outer blur; the ``on`` polarity keeps its positive part, ``off`` keeps
    the negated negative part.  The output is everywhere >= 0 and has the
    input's shape.
    """
    arr = validate_image(img)
    inner = gaussian_blur(arr, INNER_SIGMA_RATIO * params.sigma_outer)
    outer = gaussian_blur(arr, params.sigma_outer)
    raw = inner - outer
    if params.polarity == "on":
        return np.maximum(raw, 0.0)
    return np.maximum(-raw, 0.0)


def threshold_map(response: np.ndarray, t1_fraction: float) -> np.ndarray:
    """Zero all response values below ``t1_fraction`` of the map's maximum."""
    if not 0.0 <= t1_fraction <= 1.0:
        raise ValueError("t1_fraction must lie in [0, 1]")
    arr = np.asarray(response, dtype=np.float64)
    return np.where(arr < t1_fraction * arr.max(), 0.0, arr)

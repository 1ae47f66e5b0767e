"""Shared exception types and small numeric helpers."""

from __future__ import annotations

import numpy as np


class UsageError(ValueError):
    """Invalid arguments or configuration (CLI exit code 1)."""


class DataError(ValueError):
    """Missing, malformed, or degenerate input data (CLI exit code 2)."""


class DimensionError(DataError):
    """Array shape violates an operation's preconditions."""


class NumericError(ArithmeticError):
    """Non-finite values or a numerically unsolvable problem (CLI exit code 3)."""


def require(cond: bool, exc_type: type[Exception], msg: str) -> None:
    if not cond:
        raise exc_type(msg)


def gaussian_kernel_1d(sigma: float, radius: int | None = None) -> np.ndarray:
    """Normalized 1-D Gaussian taps; default radius covers 2*sigma."""
    if radius is None:
        radius = max(1, int(round(2.0 * sigma)))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def gaussian_blur(img: np.ndarray, sigma: float, radius: int | None = None) -> np.ndarray:
    """Separable Gaussian blur with replicate borders; works on HW or HWC arrays."""
    from scipy.ndimage import correlate1d

    k = gaussian_kernel_1d(sigma, radius)
    out = correlate1d(img.astype(np.float64, copy=False), k, axis=0, mode="nearest")
    out = correlate1d(out, k, axis=1, mode="nearest")
    return out.astype(img.dtype, copy=False)

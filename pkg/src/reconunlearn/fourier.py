"""Centered, orthonormal 2-D Fourier transforms over the last two axes.

All transforms go through torch so that the data pipeline and the network
share one numerical path (ground-truth targets are bit-identical to a
zero-refinement reconstruction of fully sampled data).
"""

from functools import lru_cache

import numpy as np
import torch

_DIMS = (-2, -1)


@lru_cache(maxsize=None)
def _checkerboard(height: int, width: int, dtype: torch.dtype, sign: int = 1) -> torch.Tensor:
    rows = 1 - 2 * (torch.arange(height) % 2)
    cols = 1 - 2 * (torch.arange(width) % 2)
    return (sign * rows[:, None] * cols[None, :]).to(dtype)


def _centered(x: torch.Tensor, transform) -> torch.Tensor:
    height, width = x.shape[-2:]
    if height % 2 or width % 2:
        x = torch.fft.ifftshift(x, dim=_DIMS)
        return torch.fft.fftshift(transform(x, dim=_DIMS, norm="ortho"), dim=_DIMS)
    # for even sizes, (i)fftshift around a transform equals modulation by
    # (-1)^n on both sides, times the global sign (-1)^(H/2 + W/2)
    sign = -1 if (height // 2 + width // 2) % 2 else 1
    inner = _checkerboard(height, width, x.dtype)
    outer = _checkerboard(height, width, x.dtype, sign)
    return outer * transform(inner * x, dim=_DIMS, norm="ortho")


def fft2c(x: torch.Tensor) -> torch.Tensor:
    return _centered(x, torch.fft.fft2)


def ifft2c(x: torch.Tensor) -> torch.Tensor:
    return _centered(x, torch.fft.ifft2)


def rss(coil_images: torch.Tensor, dim: int = -3) -> torch.Tensor:
    """Root-sum-of-squares magnitude over the coil axis."""
    power = (coil_images.real ** 2 + coil_images.imag ** 2).sum(dim=dim)
    # exact zeros stay zero with a zero (not NaN) gradient; NaN still propagates
    zero = power == 0
    safe = torch.where(zero, torch.ones_like(power), power)
    return torch.where(zero, torch.zeros_like(power), torch.sqrt(safe))


def fft2c_np(x: np.ndarray) -> np.ndarray:
    return fft2c(torch.from_numpy(np.ascontiguousarray(x))).numpy()


def ifft2c_np(x: np.ndarray) -> np.ndarray:
    return ifft2c(torch.from_numpy(np.ascontiguousarray(x))).numpy()

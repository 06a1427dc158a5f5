"""Finite-difference stencils and periodic halo padding.

Stencils are stored as cross-correlation coefficients over offsets
``-r..r``; applying one means ``out[i] = sum_j coef[j] * u[i + j - r]`` with
periodic wrap. The halo width is always ``kernel_extent // 2``.
"""
from dataclasses import dataclass

import numpy as np

from . import kernels


@dataclass(frozen=True)
class Stencil:
    coefficients: np.ndarray
    spacing: float
    derivative_order: str  # "laplacian", "d3x" or "d1x"

    @property
    def ndim(self):
        return self.coefficients.ndim

    @property
    def halo(self):
        return max(self.coefficients.shape) // 2


@dataclass(frozen=True)
class PaddedField:
    values: np.ndarray
    halo: int

    @property
    def interior(self):
        h = self.halo
        sl = (slice(None),) + (slice(h, -h),) * (self.values.ndim - 1)
        return self.values[sl]


def pad_periodic(field, halo):
    """Wrap-pad every spatial axis of a ``(C, *spatial)`` field by ``halo`` cells."""
    field = np.asarray(field, dtype=np.float64)
    if halo < 1:
        raise ValueError(f"halo must be >= 1, got {halo}")
    if halo > min(field.shape[1:]):
        raise ValueError(f"halo {halo} exceeds grid extent {field.shape[1:]}")
    pad = ((0, 0),) + ((halo, halo),) * (field.ndim - 1)
    return PaddedField(np.pad(field, pad, mode="wrap"), halo)


def crop_halo(padded):
    return padded.interior.copy()


def laplacian_stencil(h, ndim=1):
    """Second-order Laplacian: ``[1,-2,1]/h^2`` in 1D, 5-point in 2D."""
    if h <= 0:
        raise ValueError("spacing must be positive")
    if ndim == 1:
        c = np.array([1.0, -2.0, 1.0])
    elif ndim == 2:
        c = np.array([[0.0, 1.0, 0.0], [1.0, -4.0, 1.0], [0.0, 1.0, 0.0]])
    else:
        raise ValueError(f"unsupported dimensionality {ndim}")
    return Stencil(c / (h * h), h, "laplacian")


def d3x_stencil(h):
    """Third derivative, ``(-f[i-2] + 2f[i-1] - 2f[i+1] + f[i+2]) / (2h^3)``."""
    if h <= 0:
        raise ValueError("spacing must be positive")
    return Stencil(np.array([-1.0, 2.0, 0.0, -2.0, 1.0]) / (2.0 * h ** 3), h, "d3x")


def d1_stencil(h, axis=None, ndim=1):
    """Central first derivative ``(f[i+1] - f[i-1]) / 2h``.

    In 2D, ``axis`` 0 differentiates along rows (y) and 1 along columns (x).
    """
    if h <= 0:
        raise ValueError("spacing must be positive")
    row = np.array([-1.0, 0.0, 1.0]) / (2.0 * h)
    if ndim == 1:
        return Stencil(row, h, "d1x")
    c = np.zeros((3, 3))
    if axis == 0:
        c[:, 1] = row
    else:
        c[1, :] = row
    return Stencil(c, h, "d1x")


def _as_2d(field, s):
    field = np.asarray(field, dtype=np.float64)
    spatial = field.ndim - 1
    if spatial != s.ndim:
        raise ValueError(f"stencil is {s.ndim}D but field has {spatial} spatial dims")
    if spatial == 1:
        return np.ascontiguousarray(field[:, None, :]), s.coefficients[None, :], True
    return np.ascontiguousarray(field), np.ascontiguousarray(s.coefficients), False


def apply_stencil(field, s):
    """Periodic cross-correlation of each channel with the stencil; shape kept."""
    u, c, is1d = _as_2d(field, s)
    out = kernels.stencil_periodic(u, np.ascontiguousarray(c))
    return out[:, 0, :] if is1d else out


def apply_stencil_padded(field, s):
    """Same result via explicit halo padding followed by a valid correlation."""
    field = np.asarray(field, dtype=np.float64)
    if field.ndim - 1 != s.ndim:
        raise ValueError(f"stencil is {s.ndim}D but field has {field.ndim - 1} spatial dims")
    p = pad_periodic(field, s.halo).values
    c = s.coefficients
    out = np.zeros(field.shape)
    if s.ndim == 1:
        n = field.shape[1]
        off = s.halo - c.shape[0] // 2
        for j, cj in enumerate(c):
            if cj != 0.0:
                out += cj * p[:, off + j:off + j + n]
        return out
    H, W = field.shape[1:]
    oy = s.halo - c.shape[0] // 2
    ox = s.halo - c.shape[1] // 2
    for i in range(c.shape[0]):
        for j in range(c.shape[1]):
            if c[i, j] != 0.0:
                out += c[i, j] * p[:, oy + i:oy + i + H, ox + j:ox + j + W]
    return out

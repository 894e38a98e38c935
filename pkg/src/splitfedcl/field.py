"""Dense 2D scalar-field primitives.

Fields are plain ``float64`` numpy arrays of shape ``(height, width)`` and
masks are ``bool`` arrays of the same shape. Every finite-difference stencil
uses replicate (clamp) padding, so a constant field never produces boundary
artefacts.
"""

from __future__ import annotations

import math

import numpy as np
from scipy import ndimage

from .errors import DegenerateMask, InvalidSigma

# Below this gradient norm the unit normal is taken to be zero.
NORMAL_EPS = 1e-8


def as_field(f) -> np.ndarray:
    arr = np.asarray(f, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ValueError(f"expected a non-empty 2D field, got shape {arr.shape}")
    return arr


def as_mask(m) -> np.ndarray:
    arr = np.asarray(m)
    if arr.ndim != 2:
        raise ValueError(f"expected a 2D mask, got shape {arr.shape}")
    return arr.astype(bool, copy=False)


def signed_distance(mask) -> np.ndarray:
    """Exact Euclidean signed distance to the nearest opposite-membership pixel.

    Negative inside the mask, positive outside, measured in pixels between
    pixel centres. A pixel's value is its distance to the closest pixel of
    the other set, so the two pixels straddling a boundary read -1 and +1.

    Raises:
        DegenerateMask: if the mask is all-true or all-false.
    """
    mask = as_mask(mask)
    n_true = int(mask.sum())
    if n_true == 0 or n_true == mask.size:
        raise DegenerateMask("signed distance needs both inside and outside pixels")
    # distance_transform_edt measures from non-zero pixels to the nearest zero pixel
    inside = ndimage.distance_transform_edt(mask)
    outside = ndimage.distance_transform_edt(~mask)
    return np.where(mask, -inside, outside).astype(np.float64)


def _central_diff(f: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Row and column central differences with replicate padding."""
    p = np.pad(f, 1, mode="edge")
    d_row = 0.5 * (p[2:, 1:-1] - p[:-2, 1:-1])
    d_col = 0.5 * (p[1:-1, 2:] - p[1:-1, :-2])
    return d_row, d_col


def _minmax(f: np.ndarray) -> np.ndarray:
    lo = f.min()
    span = f.max() - lo
    if span <= 0.0:
        return np.zeros_like(f)
    return (f - lo) / span


def gradient_magnitude(f) -> np.ndarray:
    """Central-difference gradient norm, min-max normalised to [0, 1]."""
    f = as_field(f)
    d_row, d_col = _central_diff(f)
    return _minmax(np.hypot(d_row, d_col))


def laplacian(f) -> np.ndarray:
    """Raw 5-point Laplacian with replicate padding."""
    f = as_field(f)
    p = np.pad(f, 1, mode="edge")
    return p[:-2, 1:-1] + p[2:, 1:-1] + p[1:-1, :-2] + p[1:-1, 2:] - 4.0 * f


def laplacian_magnitude(f) -> np.ndarray:
    """|5-point Laplacian|, min-max normalised to [0, 1]."""
    return _minmax(np.abs(laplacian(f)))


def unit_normal(phi) -> tuple[np.ndarray, np.ndarray]:
    """Normalised gradient of ``phi`` as (row, col) components.

    Pixels whose gradient norm is below ``NORMAL_EPS`` get a zero normal.
    """
    phi = as_field(phi)
    d_row, d_col = _central_diff(phi)
    norm = np.hypot(d_row, d_col)
    ok = norm >= NORMAL_EPS
    safe = np.where(ok, norm, 1.0)
    return np.where(ok, d_row / safe, 0.0), np.where(ok, d_col / safe, 0.0)


def mean_curvature(phi) -> np.ndarray:
    """Signed divergence of the unit normal, in 1/pixels (about 1/r on a disk SDF)."""
    n_row, n_col = unit_normal(phi)
    dr_row, _ = _central_diff(n_row)
    _, dc_col = _central_diff(n_col)
    return dr_row + dc_col


def curvature(phi, eq_radius: float) -> np.ndarray:
    """Dimensionless curvature magnitude ``clip(|kappa| * eq_radius, 0, 1)``.

    ``eq_radius`` is the equivalent radius sqrt(area / pi) of the object the
    SDF was built from, which maps a circle of that area to 1.
    """
    return np.clip(np.abs(mean_curvature(phi)) * float(eq_radius), 0.0, 1.0)


def gaussian_kernel(sigma: float) -> np.ndarray:
    if not sigma > 0:
        raise InvalidSigma(f"sigma must be positive, got {sigma}")
    radius = max(1, math.ceil(3.0 * sigma))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def gaussian_smooth(f, sigma: float) -> np.ndarray:
    """Separable truncated-Gaussian blur (radius ceil(3 sigma)), replicate padding.

    Raises:
        InvalidSigma: if ``sigma <= 0``.
    """
    k = gaussian_kernel(sigma)
    f = as_field(f)
    out = ndimage.correlate1d(f, k, axis=0, mode="nearest")
    return ndimage.correlate1d(out, k, axis=1, mode="nearest")


def boundary_band(phi, w: float) -> np.ndarray:
    """Pixels with ``|phi| <= w``."""
    if not w > 0:
        raise ValueError(f"band width must be positive, got {w}")
    return np.abs(as_field(phi)) <= w


def sample_bilinear(f, rows, cols) -> np.ndarray:
    """Bilinear lookup at fractional (row, col) positions, clamped to the grid."""
    f = as_field(f)
    coords = np.stack([np.asarray(rows, dtype=np.float64), np.asarray(cols, dtype=np.float64)])
    return ndimage.map_coordinates(f, coords, order=1, mode="nearest")

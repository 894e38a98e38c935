"""Difficulty-guided boundary deformation of segmentation masks.

A clean mask is turned into a plausible human annotation by pushing its
signed distance function along the boundary normal. How far each boundary
pixel moves depends on a per-class difficulty score built from three image
and shape cues (weak edge, blur, curvature); which way it moves depends on
whether edge evidence is stronger just inside or just outside the contour.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from . import field
from .errors import DegenerateMask, MissingClass


@dataclass(frozen=True)
class DifficultyParams:
    """Knobs of the deformation model.

    ``a_max`` and the smoothing sigma are expressed as multiples of the
    per-object band width ``w``. ``delta=None`` picks ``max(1, w / 4)``.
    """

    rho: float = 2.0
    a_min: float = 0.0
    amax_scale: float = 1.0
    sigma_scale: float = 1.0
    delta: float | None = None
    epsilon: float = 1e-6
    band_coeff: float = 0.2

    def __post_init__(self):
        if not self.rho > 0:
            raise ValueError("rho must be positive")
        if self.a_min < 0 or self.amax_scale < 0:
            raise ValueError("amplitudes must be non-negative")
        if not self.sigma_scale > 0:
            raise ValueError("sigma_scale must be positive")
        if self.delta is not None and not self.delta > 0:
            raise ValueError("delta must be positive")
        if not self.epsilon > 0 or not self.band_coeff > 0:
            raise ValueError("epsilon and band_coeff must be positive")

    def a_max(self, w: float) -> float:
        return self.amax_scale * w

    def sigma(self, w: float) -> float:
        return self.sigma_scale * w

    def offset(self, w: float) -> float:
        return self.delta if self.delta is not None else max(1.0, w / 4.0)


@dataclass
class DifficultyMap:
    D: np.ndarray
    band: np.ndarray
    w: float
    phi: np.ndarray
    eq_radius: float
    class_id: int = 1


@dataclass
class DeformationRecord:
    A: np.ndarray
    b: np.ndarray
    phi_before: np.ndarray
    phi_after: np.ndarray
    changed_pixels: int
    w: float
    sigma: float


def equivalent_radius(mask) -> float:
    area = int(field.as_mask(mask).sum())
    return math.sqrt(area / math.pi)


def band_width(mask, band_coeff: float = 0.2) -> float:
    """Scale-adaptive band width ``band_coeff * sqrt(area / pi)``.

    Raises:
        DegenerateMask: for an all-true or all-false mask.
    """
    mask = field.as_mask(mask)
    area = int(mask.sum())
    if area == 0 or area == mask.size:
        raise DegenerateMask("band width undefined for a degenerate mask")
    return band_coeff * math.sqrt(area / math.pi)


def edge_cue(image, band, grad=None) -> np.ndarray:
    """Weak-edge difficulty ``(1 - g) * band``; pass ``grad`` to reuse a gradient map."""
    g = field.gradient_magnitude(image) if grad is None else grad
    return (1.0 - g) * field.as_mask(band)


def blur_cue(image, band) -> np.ndarray:
    return (1.0 - field.laplacian_magnitude(image)) * field.as_mask(band)


def curvature_cue(phi, band, eq_radius: float) -> np.ndarray:
    return field.curvature(phi, eq_radius) * field.as_mask(band)


def difficulty_map(image, mask, params: DifficultyParams | None = None, class_id: int = 1,
                   grad=None) -> DifficultyMap:
    """Mean of the edge, blur and curvature cues inside the boundary band."""
    params = params or DifficultyParams()
    image = field.as_field(image)
    mask = field.as_mask(mask)
    if image.shape != mask.shape:
        raise ValueError(f"image {image.shape} and mask {mask.shape} differ in shape")
    w = band_width(mask, params.band_coeff)
    phi = field.signed_distance(mask)
    band = field.boundary_band(phi, w)
    r_eq = equivalent_radius(mask)
    D = (edge_cue(image, band, grad) + blur_cue(image, band) + curvature_cue(phi, band, r_eq)) / 3.0
    return DifficultyMap(D=D, band=band, w=w, phi=phi, eq_radius=r_eq, class_id=class_id)


def amplitude(dmap: DifficultyMap, params: DifficultyParams | None = None) -> np.ndarray:
    """Deformation magnitude in pixels, zero off the band."""
    params = params or DifficultyParams()
    a_max = params.a_max(dmap.w)
    return (params.a_min + (a_max - params.a_min) * dmap.D ** params.rho) * dmap.band


def direction(image, phi, band, delta: float, epsilon: float = 1e-6, grad=None) -> np.ndarray:
    """Signed displacement direction in [-1, 1].

    Positive where edge evidence is stronger a distance ``delta`` inside the
    contour than outside it (the boundary should shrink), negative for the
    opposite case.
    """
    if not delta > 0:
        raise ValueError("delta must be positive")
    g = field.gradient_magnitude(image) if grad is None else grad
    band = field.as_mask(band)
    n_row, n_col = field.unit_normal(phi)
    rows, cols = np.nonzero(band)
    nr, nc = n_row[rows, cols], n_col[rows, cols]
    g_out = field.sample_bilinear(g, rows + delta * nr, cols + delta * nc)
    g_in = field.sample_bilinear(g, rows - delta * nr, cols - delta * nc)
    b = np.zeros(band.shape, dtype=np.float64)
    b[rows, cols] = np.clip((g_in - g_out) / (g_in + g_out + epsilon), -1.0, 1.0)
    return b


def deform_class(image, mask, params: DifficultyParams | None = None, grad=None,
                 class_id: int = 1) -> tuple[np.ndarray, DeformationRecord]:
    """Deform one binary mask; returns the noisy mask and the intermediate fields.

    A positive direction raises the SDF near the contour, so the object shrinks.
    """
    params = params or DifficultyParams()
    image = field.as_field(image)
    g = field.gradient_magnitude(image) if grad is None else grad
    dmap = difficulty_map(image, mask, params, class_id=class_id, grad=g)
    A = amplitude(dmap, params)
    b = direction(image, dmap.phi, dmap.band, params.offset(dmap.w), params.epsilon, grad=g)
    sigma = params.sigma(dmap.w)
    phi_after = dmap.phi + field.gaussian_smooth(A * b, sigma)
    noisy = phi_after <= 0.0
    changed = int(np.count_nonzero(noisy != field.as_mask(mask)))
    record = DeformationRecord(A=A, b=b, phi_before=dmap.phi, phi_after=phi_after,
                               changed_pixels=changed, w=dmap.w, sigma=sigma)
    return noisy, record


def deform_multiclass(image, label, params: DifficultyParams | None = None,
                      class_subset: Iterable[int] | None = None,
                      records: dict | None = None) -> np.ndarray:
    """Deform each listed foreground class with its own difficulty map.

    Pixels take the foreground class with the most negative deformed SDF
    (lowest id on ties) and fall back to background (0) when no deformed SDF
    is non-positive. ``class_subset=None`` means every foreground class present.
    If ``records`` is a dict it is filled with one DeformationRecord per
    deformed class.

    Raises:
        MissingClass: if a class in ``class_subset`` does not occur in ``label``.
    """
    params = params or DifficultyParams()
    image = field.as_field(image)
    label = np.asarray(label)
    if image.shape != label.shape:
        raise ValueError(f"image {image.shape} and label {label.shape} differ in shape")
    present = [int(c) for c in np.unique(label) if c > 0]
    subset = set(present) if class_subset is None else {int(c) for c in class_subset}
    missing = sorted(subset - set(present))
    if missing:
        raise MissingClass(f"classes {missing} are not present in the label")
    if not subset:
        return label.copy()

    g = field.gradient_magnitude(image)
    classes = sorted(present)
    phis = np.empty((len(classes),) + label.shape, dtype=np.float64)
    for i, c in enumerate(classes):
        m = label == c
        if c in subset:
            _, rec = deform_class(image, m, params, grad=g, class_id=c)
            phis[i] = rec.phi_after
            if records is not None:
                records[c] = rec
        elif m.all():
            phis[i] = -1.0
        else:
            phis[i] = field.signed_distance(m)

    return assign_labels(phis, classes).astype(label.dtype, copy=False)


def assign_labels(phis: np.ndarray, classes) -> np.ndarray:
    """Label map from stacked per-class SDFs ``(K, H, W)``.

    Each pixel takes the class with the smallest non-positive SDF, the
    lowest id on ties, and background (0) when every SDF is positive.
    ``classes`` lists the class id of each slice in ascending order.
    """
    phis = np.asarray(phis, dtype=np.float64)
    # argmin returns the first minimum, i.e. the lowest class id on ties
    best = np.argmin(phis, axis=0)
    best_val = np.take_along_axis(phis, best[None], axis=0)[0]
    return np.where(best_val <= 0.0, np.asarray(classes, dtype=np.int64)[best], 0)

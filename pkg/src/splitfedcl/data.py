"""Synthetic multiclass scenes and the federated client layout built from them."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np

from . import annsim, field, pgm
from .errors import PlacementError

MAX_PLACEMENT_ATTEMPTS = 100
# halo reach as a multiple of the semi-axis, used for placement clearance
_HALO_REACH = 1.35


@dataclass(frozen=True)
class SceneConfig:
    """Rendering parameters for one synthetic image.

    Each foreground class gets one rotated ellipse. ``intensities`` holds the
    grey level of the background followed by each foreground class.

    Every ellipse carries a transitional layer whose thickness is
    ``rim_range`` times the object's band width: either a faint shell just
    inside the true contour or a bright halo just outside it. The strongest
    edge therefore sits off the true contour, as in images with fuzzy
    boundaries. Scenes are drawn and annotated on a grid
    ``annotation_scale`` times finer than ``size`` and block-reduced
    afterwards.
    """

    size: int = 64
    n_classes: int = 3
    axis_range: tuple[float, float] = (6.0, 11.0)
    intensities: tuple[float, ...] = (0.2, 0.5, 0.85)
    rim_range: tuple[float, float] = (0.8, 1.3)
    rim_modulation: float = 0.25
    shell_level: tuple[float, float] = (0.05, 0.3)
    halo_level: tuple[float, float] = (0.7, 0.95)
    texture_std: float = 0.03
    noise_std: float = 0.02
    blur_range: tuple[float, float] = (0.5, 1.0)
    shading: float = 0.1
    margin: int = 2
    annotation_scale: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.n_classes < 2:
            raise ValueError("need at least background plus one foreground class")
        if len(self.intensities) != self.n_classes:
            raise ValueError("one intensity per class (background first) is required")
        lo, hi = self.axis_range
        if lo < 3 or hi < lo:
            raise ValueError("ellipse semi-axes must be >= 3 pixels and ordered")
        if 2 * (_HALO_REACH * hi + self.margin) > self.size:
            raise ValueError("largest ellipse does not fit in the frame")
        if not 0 <= self.rim_range[0] <= self.rim_range[1] or not 0 <= self.rim_modulation <= 1:
            raise ValueError("rim_range must be ordered and non-negative, rim_modulation in [0, 1]")
        if min(self.noise_std, self.texture_std, self.shading, *self.blur_range) < 0:
            raise ValueError("noise, texture, shading and blur must be non-negative")
        if self.blur_range[1] < self.blur_range[0]:
            raise ValueError("blur_range must be ordered")
        if self.annotation_scale < 1:
            raise ValueError("annotation_scale must be >= 1")


@dataclass(frozen=True)
class FederationLayout:
    client_sizes: tuple[int, ...] = (100, 150, 200, 50)
    corruption_ratios: tuple[float, ...] = (0.2, 0.5, 0.8, 0.0)
    test_size: int = 100

    def __post_init__(self):
        if len(self.client_sizes) != len(self.corruption_ratios):
            raise ValueError("client_sizes and corruption_ratios differ in length")
        if not self.client_sizes or any(n < 1 for n in self.client_sizes):
            raise ValueError("every client needs at least one sample")
        if any(not 0.0 <= r <= 1.0 for r in self.corruption_ratios):
            raise ValueError("corruption ratios must lie in [0, 1]")
        if self.test_size < 1:
            raise ValueError("test set must be non-empty")

    @property
    def n_clients(self) -> int:
        return len(self.client_sizes)

    def corrupted_counts(self) -> list[int]:
        return [int(round(n * r)) for n, r in zip(self.client_sizes, self.corruption_ratios)]


@dataclass
class Sample:
    sample_id: int
    image: np.ndarray
    label: np.ndarray
    clean_label: np.ndarray
    corrupted: bool = False


@dataclass
class ClientData:
    client_id: int
    samples: list[Sample] = dc_field(default_factory=list)

    def __len__(self):
        return len(self.samples)

    @property
    def corruption_flags(self) -> np.ndarray:
        """Ground-truth corruption flags; for evaluation and reporting only."""
        return np.array([s.corrupted for s in self.samples], dtype=bool)


def _ellipse_polar(rr, cc, center, axes, angle):
    """Normalised elliptic radius (1 on the contour) and polar angle."""
    cos_t, sin_t = math.cos(angle), math.sin(angle)
    dr, dc = rr - center[0], cc - center[1]
    u = (dc * cos_t + dr * sin_t) / axes[0]
    v = (-dc * sin_t + dr * cos_t) / axes[1]
    return np.hypot(u, v), np.arctan2(v, u)


def _layout(rng, cfg: SceneConfig, rr, cc):
    """Draw (center, axes, angle) for every foreground class.

    A whole layout is redrawn when a shape does not fit, so an unlucky first
    placement cannot block the rest.
    """
    lo, hi = cfg.axis_range
    n = cfg.size
    for _ in range(MAX_PLACEMENT_ATTEMPTS):
        occupied = np.zeros(rr.shape, dtype=bool)
        shapes = []
        for _c in range(1, cfg.n_classes):
            axes = (rng.uniform(lo, hi), rng.uniform(lo, hi))
            reach = _HALO_REACH * max(axes) + cfg.margin
            center = (rng.uniform(reach, n - 1 - reach), rng.uniform(reach, n - 1 - reach))
            angle = rng.uniform(0.0, math.pi)
            # halos plus a margin must stay clear of earlier shapes
            grown = (_HALO_REACH * axes[0] + cfg.margin, _HALO_REACH * axes[1] + cfg.margin)
            if (occupied & (_ellipse_polar(rr, cc, center, grown, angle)[0] <= 1.0)).any():
                break
            occupied |= _ellipse_polar(rr, cc, center, axes, angle)[0] <= _HALO_REACH
            shapes.append((center, axes, angle))
        else:
            return shapes
    raise PlacementError(f"could not place all shapes after {MAX_PLACEMENT_ATTEMPTS} attempts")


def render_scene(cfg: SceneConfig, sample_seed: int):
    """Draw a scene on the fine annotation grid.

    Returns ``(fine_image, fine_label, rng)``; the generator is returned so
    the caller can draw the coarse-grid pixel noise from the same stream.
    """
    rng = np.random.default_rng([cfg.seed, sample_seed])
    f = cfg.annotation_scale
    n = cfg.size * f
    # fine-pixel centres expressed in coarse-pixel coordinates
    rr, cc = (np.mgrid[0:n, 0:n] + 0.5) / f - 0.5

    label = np.zeros((n, n), dtype=np.int64)
    image = np.full((n, n), cfg.intensities[0], dtype=np.float64)
    for c, (center, axes, angle) in enumerate(_layout(rng, cfg, rr, cc), start=1):
        rho, theta = _ellipse_polar(rr, cc, center, axes, angle)
        inside = rho <= 1.0
        label[inside] = c

        w = 0.2 * math.sqrt(axes[0] * axes[1])
        mean_axis = 0.5 * (axes[0] + axes[1])
        lobes = rng.integers(1, 4)
        phase = rng.uniform(0.0, 2.0 * math.pi)
        thickness = rng.uniform(*cfg.rim_range) * w
        thickness = thickness * (1.0 - cfg.rim_modulation + cfg.rim_modulation * np.cos(lobes * theta + phase))
        contrast = cfg.intensities[c] - cfg.intensities[0]
        if rng.random() < 0.5:
            # faint shell: the visible edge lies inside the true contour
            core = rho <= 1.0 - thickness / mean_axis
            level = rng.uniform(*cfg.shell_level)
            image += contrast * (core + level * (inside & ~core))
        else:
            # bright halo: the visible edge lies outside the true contour
            halo = (rho <= 1.0 + thickness / mean_axis) & ~inside
            level = rng.uniform(*cfg.halo_level)
            image += contrast * (inside + level * halo)

    if cfg.shading > 0:
        theta = rng.uniform(0.0, 2.0 * math.pi)
        image += cfg.shading * (math.cos(theta) * (rr - cfg.size / 2) + math.sin(theta) * (cc - cfg.size / 2)) / cfg.size
    if cfg.texture_std > 0:
        texture = field.gaussian_smooth(rng.normal(size=image.shape), float(f))
        image += cfg.texture_std * texture / max(texture.std(), 1e-12)
    blur = rng.uniform(*cfg.blur_range)
    if blur > 0:
        image = field.gaussian_smooth(image, blur * f)
    return image, label, rng


def block_mean(image: np.ndarray, factor: int) -> np.ndarray:
    if factor == 1:
        return image.copy()
    h, w = image.shape
    return image.reshape(h // factor, factor, w // factor, factor).mean(axis=(1, 3))


def block_mode(label: np.ndarray, factor: int, n_classes: int) -> np.ndarray:
    """Majority class per block, lowest class id on ties."""
    if factor == 1:
        return label.copy()
    h, w = label.shape
    blocks = label.reshape(h // factor, factor, w // factor, factor)
    counts = np.stack([(blocks == c).sum(axis=(1, 3)) for c in range(n_classes)])
    return counts.argmax(axis=0).astype(label.dtype)


def _finish(cfg: SceneConfig, fine_image, rng):
    image = block_mean(fine_image, cfg.annotation_scale)
    if cfg.noise_std > 0:
        image = image + rng.normal(0.0, cfg.noise_std, size=image.shape)
    return image


def generate_scene(cfg: SceneConfig, sample_seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Render one (image, label) pair, deterministic in ``(cfg, sample_seed)``."""
    fine_image, fine_label, rng = render_scene(cfg, sample_seed)
    label = block_mode(fine_label, cfg.annotation_scale, cfg.n_classes)
    return _finish(cfg, fine_image, rng), label


def generate_corrupted_scene(cfg: SceneConfig, sample_seed: int,
                             params: annsim.DifficultyParams | None = None):
    """Like ``generate_scene`` but also returns a deformed annotation.

    The deformation runs on the fine grid, where the band width spans
    several pixels, and the noisy label is block-reduced like the clean one.

    Returns:
        (image, clean_label, noisy_label)
    """
    fine_image, fine_label, rng = render_scene(cfg, sample_seed)
    noisy_fine = annsim.deform_multiclass(fine_image, fine_label, params)
    f, c = cfg.annotation_scale, cfg.n_classes
    return _finish(cfg, fine_image, rng), block_mode(fine_label, f, c), block_mode(noisy_fine, f, c)


def build_federation(cfg: SceneConfig, layout: FederationLayout, seed: int | None = None,
                     params: annsim.DifficultyParams | None = None):
    """Generate client datasets with injected annotation noise plus a clean test set.

    Sample ids are consecutive and globally unique; the test set uses the
    ids after the last client sample. For each client a seeded random subset
    of ``round(n * ratio)`` samples has its label replaced by the
    difficulty-guided deformation of every foreground class, computed on
    the fine annotation grid.

    Returns:
        (clients, test_samples)
    """
    seed = cfg.seed if seed is None else seed
    params = params or annsim.DifficultyParams()
    rng = np.random.default_rng([seed, 7919])
    next_id = 0
    clients = []
    for cid, (n, k) in enumerate(zip(layout.client_sizes, layout.corrupted_counts())):
        picked = set(rng.choice(n, size=k, replace=False).tolist()) if k else set()
        data = ClientData(client_id=cid)
        for j in range(n):
            if j in picked:
                image, label, noisy = generate_corrupted_scene(cfg, next_id, params)
            else:
                image, label = generate_scene(cfg, next_id)
                noisy = label
            data.samples.append(Sample(next_id, image, noisy, label, corrupted=j in picked))
            next_id += 1
        clients.append(data)
    test = []
    for _ in range(layout.test_size):
        image, label = generate_scene(cfg, next_id)
        test.append(Sample(next_id, image, label, label))
        next_id += 1
    return clients, test


def dump_dataset(clients, test, out_dir) -> Path:
    """Write every sample as PGM pairs plus a ``manifest.csv`` index."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    groups = [(str(c.client_id), c.samples) for c in clients] + [("test", test)]
    for owner, samples in groups:
        for s in samples:
            stem = f"{s.sample_id:06d}"
            pgm.write_image(out / f"{stem}_image.pgm", s.image)
            pgm.write_label(out / f"{stem}_label.pgm", s.label)
            rows.append({"sample_id": s.sample_id, "client_id": owner, "corrupted": int(s.corrupted)})
    manifest = out / "manifest.csv"
    with manifest.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["sample_id", "client_id", "corrupted"])
        writer.writeheader()
        writer.writerows(rows)
    return manifest


# grey levels are mapped to roughly zero mean and unit spread before training
INPUT_CENTER = 0.5
INPUT_SCALE = 0.25


def network_input(images, dtype=np.float32) -> np.ndarray:
    """Stack 2D images into a standardised ``(n, 1, H, W)`` network batch."""
    x = (np.asarray(images, dtype=np.float64) - INPUT_CENTER) / INPUT_SCALE
    return x[:, None].astype(dtype)

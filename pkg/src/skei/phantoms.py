"""Synthetic test images and coil sensitivities."""

from __future__ import annotations

import numpy as np

from .errors import ConfigError

# (intensity, semi-axis a, semi-axis b, centre x, centre y, angle in degrees)
_SHEPP_LOGAN = (
    (1.0, 0.69, 0.92, 0.0, 0.0, 0.0),
    (-0.8, 0.6624, 0.8740, 0.0, -0.0184, 0.0),
    (-0.2, 0.1100, 0.3100, 0.22, 0.0, -18.0),
    (-0.2, 0.1600, 0.4100, -0.22, 0.0, 18.0),
    (0.1, 0.2100, 0.2500, 0.0, 0.35, 0.0),
    (0.1, 0.0460, 0.0460, 0.0, 0.1, 0.0),
    (0.1, 0.0460, 0.0460, 0.0, -0.1, 0.0),
    (0.1, 0.0460, 0.0230, -0.08, -0.605, 0.0),
    (0.1, 0.0230, 0.0230, 0.0, -0.606, 0.0),
    (0.1, 0.0230, 0.0460, 0.06, -0.605, 0.0),
)

# Non-overlapping disks: (intensity, radius, centre x, centre y) in unit-square coordinates [-1, 1].
DISK_CATALOG = (
    (1.0, 0.30, -0.35, 0.30),
    (0.6, 0.22, 0.40, 0.35),
    (0.8, 0.18, 0.35, -0.40),
    (0.4, 0.25, -0.30, -0.35),
    (0.5, 0.08, 0.02, 0.00),
)

PHANTOM_KINDS = ("shepp-logan", "disks")
_SUPERSAMPLE = 4


def _grid(size: int) -> tuple[np.ndarray, np.ndarray]:
    # Supersampled pixel centres; y points up so the top row has y close to 1.
    n = size * _SUPERSAMPLE
    coords = (np.arange(n) + 0.5) / n * 2.0 - 1.0
    xx, yy = np.meshgrid(coords, -coords)
    return xx, yy


def _downsample(fine: np.ndarray, size: int) -> np.ndarray:
    return fine.reshape(size, _SUPERSAMPLE, size, _SUPERSAMPLE).mean(axis=(1, 3))


def _ellipses(size: int, ellipses) -> np.ndarray:
    xx, yy = _grid(size)
    img = np.zeros_like(xx)
    for value, a, b, cx, cy, phi in ellipses:
        t = np.deg2rad(phi)
        dx, dy = xx - cx, yy - cy
        u = dx * np.cos(t) + dy * np.sin(t)
        v = -dx * np.sin(t) + dy * np.cos(t)
        img[(u / a) ** 2 + (v / b) ** 2 <= 1.0] += value
    return _downsample(img, size)


def shepp_logan(size: int) -> np.ndarray:
    return np.clip(_ellipses(size, _SHEPP_LOGAN), 0.0, 1.0)


def disks(size: int, catalog=DISK_CATALOG) -> np.ndarray:
    xx, yy = _grid(size)
    img = np.zeros_like(xx)
    for value, r, cx, cy in catalog:
        img[(xx - cx) ** 2 + (yy - cy) ** 2 <= r * r] = value
    return _downsample(img, size)


def disk_mass(size: int, catalog=DISK_CATALOG) -> float:
    """Analytic sum of intensity times area, in pixel units."""
    scale = (size / 2.0) ** 2
    return float(sum(v * np.pi * r * r * scale for v, r, _, _ in catalog))


def make_phantom(kind: str, size: int) -> np.ndarray:
    """Deterministic ``(size, size)`` float64 phantom with values in [0, 1]."""
    if size < 16:
        raise ConfigError(f"phantom size must be >= 16, got {size}", field="image_size")
    if kind == "shepp-logan":
        return shepp_logan(size)
    if kind == "disks":
        return disks(size)
    raise ConfigError(f"unknown phantom kind {kind!r}", field="phantom")


def random_ellipses(size: int, rng: np.random.Generator, n_ellipses: int = 8) -> np.ndarray:
    """A random ellipse phantom in [0, 1] with an outer support ellipse."""
    outer_a, outer_b = rng.uniform(0.6, 0.85, size=2)
    shapes = [(1.0, outer_a, outer_b, 0.0, 0.0, rng.uniform(-20, 20))]
    for _ in range(n_ellipses):
        a, b = rng.uniform(0.04, 0.3, size=2)
        cx, cy = rng.uniform(-0.45, 0.45, size=2)
        shapes.append((rng.uniform(-0.5, 0.5), a, b, cx, cy, rng.uniform(0, 180)))
    img = _ellipses(size, shapes)
    return np.clip(img, 0.0, 1.0)


def make_coil_maps(n_coils: int, size: int, width: float = 0.9) -> np.ndarray:
    """Smooth complex sensitivities from coils evenly spaced on a ring.

    Each map is a Gaussian magnitude profile centred on its coil with a
    gentle linear phase, so neighbouring coils overlap and are correlated.
    """
    if n_coils < 1:
        raise ConfigError("need at least one coil", field="n_coils")
    coords = (np.arange(size) + 0.5) / size * 2.0 - 1.0
    xx, yy = np.meshgrid(coords, -coords)
    maps = np.empty((n_coils, size, size), dtype=np.complex128)
    for c in range(n_coils):
        t = 2 * np.pi * c / n_coils
        px, py = 1.3 * np.cos(t), 1.3 * np.sin(t)
        mag = np.exp(-((xx - px) ** 2 + (yy - py) ** 2) / (2 * width**2))
        phase = 0.5 * np.pi * (np.cos(t) * xx + np.sin(t) * yy) + t
        maps[c] = mag * np.exp(1j * phase)
    return maps


def complex_phantom(kind: str, size: int) -> np.ndarray:
    """Phantom magnitude with a smooth, slowly varying phase."""
    mag = make_phantom(kind, size)
    coords = (np.arange(size) + 0.5) / size * 2.0 - 1.0
    xx, yy = np.meshgrid(coords, -coords)
    return mag * np.exp(1j * 0.4 * np.pi * (xx * 0.7 + yy * 0.3))

"""Planar rotation group acting on image tensors."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ConfigError


@dataclass(frozen=True)
class RotationGroup:
    """Cyclic rotation group of ``order`` equispaced angles; the last element is 360 degrees."""

    order: int = 360

    def __post_init__(self):
        if self.order < 1:
            raise ConfigError("group order must be >= 1", field="group_order")

    @property
    def step(self) -> float:
        return 360.0 / self.order

    @property
    def elements(self) -> np.ndarray:
        return np.arange(1, self.order + 1) * self.step


def sample_group(group: RotationGroup, rng: np.random.Generator) -> float:
    """Uniform element in degrees; consumes one draw from ``rng``."""
    return float(rng.integers(1, group.order + 1) * group.step)


def apply_rotation(image: torch.Tensor, g: float) -> torch.Tensor:
    """Rotate ``(B, C, H, W)`` images counter-clockwise by ``g`` degrees about the centre.

    Multiples of 90 degrees on square images are exact index permutations;
    other angles use bilinear interpolation with zeros outside the grid.
    Channels (e.g. real and imaginary planes) are rotated independently.
    """
    quarter, rem = divmod(float(g) % 360.0, 90.0)
    h, w = image.shape[-2:]
    if rem == 0.0 and (h == w or quarter % 2 == 0):
        return image.clone() if quarter == 0 else torch.rot90(image, int(quarter), dims=(-2, -1))
    return _bilinear_rotate(image, g)


def _bilinear_rotate(image: torch.Tensor, g: float) -> torch.Tensor:
    h, w = image.shape[-2:]
    rad = math.radians(g)
    c, s = math.cos(rad), math.sin(rad)
    dtype = image.dtype
    rows = torch.arange(h, dtype=dtype) - (h - 1) / 2.0
    cols = torch.arange(w, dtype=dtype) - (w - 1) / 2.0
    yy, xx = torch.meshgrid(-rows, cols, indexing="ij")
    # Pull back each output pixel through the inverse rotation.
    xs = c * xx + s * yy
    ys = -s * xx + c * yy
    gx = xs / max((w - 1) / 2.0, 1e-12)
    gy = -ys / max((h - 1) / 2.0, 1e-12)
    grid = torch.stack((gx, gy), dim=-1).expand(image.shape[0], h, w, 2)
    return F.grid_sample(image, grid, mode="bilinear", padding_mode="zeros", align_corners=True)

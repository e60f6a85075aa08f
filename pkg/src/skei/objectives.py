"""Training losses: measurement consistency, EI, sketched EI and noise-injected REI."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch

from .groupact import apply_rotation
from .linops import MeasurementModel, sq_norm
from .sketch import SketchedModel


@dataclass
class LossBreakdown:
    """``total = mc + lam * ei``; ``recon`` is the detached network output F(z)."""

    mc: torch.Tensor
    ei: torch.Tensor
    lam: float
    recon: torch.Tensor | None = None

    @property
    def total(self) -> torch.Tensor:
        return self.mc + self.lam * self.ei

    def is_finite(self) -> bool:
        return all(math.isfinite(float(t.detach())) for t in (self.mc, self.ei))

    def values(self) -> dict[str, float]:
        return {"mc": float(self.mc.detach()), "ei": float(self.ei.detach()), "total": float(self.total.detach())}


def dip_loss(net, z: torch.Tensor, y: torch.Tensor, model: MeasurementModel) -> torch.Tensor:
    """||y - A F(z)||^2."""
    return sq_norm(y - model.apply(net(z)))


def _ei_terms(net, z, y, model: MeasurementModel, g: float, lam: float,
              noise_sigma: float = 0.0, generator: torch.Generator | None = None) -> LossBreakdown:
    x1 = net(z)
    mc = sq_norm(y - model.apply(x1))
    x2 = apply_rotation(x1, g)
    meas = model.apply(x2)
    if noise_sigma > 0:
        meas = meas + noise_sigma * _randn_like(meas, generator)
    x3 = net(model.pinv(meas))
    ei = sq_norm(x2 - x3)
    return LossBreakdown(mc, ei, lam, x1.detach())


def _randn_like(t: torch.Tensor, generator: torch.Generator | None) -> torch.Tensor:
    # Complex measurements get independent N(0, sigma^2) real and imaginary parts.
    if t.is_complex():
        real = torch.randn(t.shape, generator=generator, dtype=t.real.dtype)
        imag = torch.randn(t.shape, generator=generator, dtype=t.real.dtype)
        return torch.complex(real, imag)
    return torch.randn(t.shape, generator=generator, dtype=t.dtype)


def ei_loss(net, y: torch.Tensor, model: MeasurementModel, g: float, lam: float = 1.0,
            z: torch.Tensor | None = None) -> LossBreakdown:
    """Full EI objective with network input z = A^dagger y."""
    if z is None:
        z = model.pinv(y)
    return _ei_terms(net, z, y, model, g, lam)


def sketched_ei_loss(net, y_s: torch.Tensor, sk: SketchedModel | MeasurementModel,
                     z: torch.Tensor, g: float, lam: float = 1.0) -> LossBreakdown:
    """EI objective with A, A^dagger and y replaced by their sketches.

    ``z`` is the unsketched A^dagger y, computed once per run.
    """
    model = sk.model if isinstance(sk, SketchedModel) else sk
    return _ei_terms(net, z, y_s, model, g, lam)


def rei_sketched_loss(net, y_s: torch.Tensor, sk: SketchedModel | MeasurementModel,
                      z: torch.Tensor, g: float, lam: float = 1.0, noise_sigma: float = 0.0,
                      generator: torch.Generator | None = None) -> LossBreakdown:
    """Sketched EI with simulated noise added to A_S x2 before A_S^dagger."""
    if noise_sigma < 0:
        raise ValueError("noise_sigma must be >= 0")
    model = sk.model if isinstance(sk, SketchedModel) else sk
    return _ei_terms(net, z, y_s, model, g, lam, noise_sigma, generator)

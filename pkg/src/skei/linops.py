"""Matrix-free forward operators for sparse-view CT and multi-coil MRI.

Images are real tensors of shape ``(B, C, H, W)``: one channel for CT, two
channels (real, imaginary) for MRI. CT sinograms are ``(B, n_angles,
n_detectors)`` real tensors; MRI k-space stacks are ``(B, n_coils, H, W)``
complex tensors with masked-out samples exactly zero.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np
import torch

from .errors import ConfigError, ShapeError

__all__ = [
    "MeasurementModel",
    "CTModel",
    "MRIModel",
    "ct_forward",
    "ct_fbp",
    "mri_forward",
    "mri_pinv",
    "adjoint_test",
    "make_cartesian_mask",
    "uniform_angles",
    "fft2c",
    "ifft2c",
    "sq_norm",
    "to_complex",
    "to_channels",
]



def sq_norm(t: torch.Tensor) -> torch.Tensor:
    """Sum of squared magnitudes, differentiable for real and complex input."""
    if t.is_complex():
        return (t.real**2 + t.imag**2).sum()
    return (t**2).sum()


def real_inner(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Real inner product Re<a, b>, the one under which adjoints are taken."""
    if a.is_complex() or b.is_complex():
        return (a.conj() * b).real.sum()
    return (a * b).sum()


def to_complex(x: torch.Tensor) -> torch.Tensor:
    """``(B, 2, H, W)`` real planes -> ``(B, H, W)`` complex."""
    if x.shape[-3] != 2:
        raise ShapeError(f"expected 2 channels (real, imag), got {x.shape[-3]}")
    return torch.complex(x[..., 0, :, :], x[..., 1, :, :])


def to_channels(z: torch.Tensor) -> torch.Tensor:
    """``(B, H, W)`` complex -> ``(B, 2, H, W)`` real planes."""
    return torch.stack((z.real, z.imag), dim=-3)


def fft2c(x: torch.Tensor) -> torch.Tensor:
    """Centered, unitary 2-D FFT over the last two axes."""
    x = torch.fft.ifftshift(x, dim=(-2, -1))
    x = torch.fft.fft2(x, norm="ortho")
    return torch.fft.fftshift(x, dim=(-2, -1))


def ifft2c(k: torch.Tensor) -> torch.Tensor:
    """Inverse of :func:`fft2c`."""
    k = torch.fft.ifftshift(k, dim=(-2, -1))
    k = torch.fft.ifft2(k, norm="ortho")
    return torch.fft.fftshift(k, dim=(-2, -1))


def _complex_dtype(dtype: torch.dtype) -> torch.dtype:
    return torch.complex128 if dtype == torch.float64 else torch.complex64


def _real_dtype(dtype: torch.dtype) -> torch.dtype:
    if dtype in (torch.complex128, torch.float64):
        return torch.float64
    return torch.float32


class MeasurementModel:
    """Linear measurement operator with adjoint and a stable pseudo-inverse."""

    kind: str = ""
    image_shape: tuple[int, int, int]
    measurement_shape: tuple[int, ...]
    measurement_is_complex: bool = False

    def apply(self, x: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    def adjoint(self, y: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    def pinv(self, y: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    def __call__(self, x: torch.Tensor) -> torch.Tensor:
        return self.apply(x)

    def random_image(self, gen: np.random.Generator, batch: int = 1,
                     dtype: torch.dtype = torch.float64) -> torch.Tensor:
        arr = gen.standard_normal((batch, *self.image_shape))
        return torch.from_numpy(arr).to(dtype)

    def random_measurement(self, gen: np.random.Generator, batch: int = 1,
                           dtype: torch.dtype = torch.float64) -> torch.Tensor:
        shape = (batch, *self.measurement_shape)
        if self.measurement_is_complex:
            arr = gen.standard_normal(shape) + 1j * gen.standard_normal(shape)
            return torch.from_numpy(arr).to(_complex_dtype(dtype))
        return torch.from_numpy(gen.standard_normal(shape)).to(dtype)


class IdentityModel(MeasurementModel):
    """A = I on ``(C, H, W)`` images; A^dagger = A^T = I."""

    kind = "identity"

    def __init__(self, image_shape: tuple[int, int, int]):
        self.image_shape = tuple(int(s) for s in image_shape)
        self.measurement_shape = self.image_shape

    def apply(self, x: torch.Tensor) -> torch.Tensor:
        return x.clone()

    def adjoint(self, y: torch.Tensor) -> torch.Tensor:
        return y.clone()

    def pinv(self, y: torch.Tensor) -> torch.Tensor:
        return y.clone()


class MatrixModel(MeasurementModel):
    """Dense matrix acting on flattened ``(C, H, W)`` images.

    ``pinv`` uses the Moore-Penrose pseudo-inverse computed once at build time.
    """

    kind = "matrix"

    def __init__(self, matrix, image_shape: tuple[int, int, int]):
        mat = torch.as_tensor(np.asarray(matrix, dtype=np.float64))
        if mat.ndim != 2 or mat.shape[1] != int(np.prod(image_shape)):
            raise ShapeError(f"matrix {tuple(mat.shape)} does not act on images of shape {image_shape}")
        self.matrix = mat
        self._pinv = torch.linalg.pinv(mat)
        self.image_shape = tuple(int(s) for s in image_shape)
        self.measurement_shape = (mat.shape[0],)

    def apply(self, x: torch.Tensor) -> torch.Tensor:
        return x.reshape(x.shape[0], -1) @ self.matrix.to(x.dtype).T

    def adjoint(self, y: torch.Tensor) -> torch.Tensor:
        return (y @ self.matrix.to(y.dtype)).reshape(y.shape[0], *self.image_shape)

    def pinv(self, y: torch.Tensor) -> torch.Tensor:
        return (y @ self._pinv.to(y.dtype).T).reshape(y.shape[0], *self.image_shape)


# ---------------------------------------------------------------------------
# CT


def uniform_angles(n_angles: int) -> np.ndarray:
    """``n_angles`` equispaced projection angles in degrees over [0, 180)."""
    if n_angles < 1:
        raise ConfigError("need at least one angle", field="n_angles")
    return np.arange(n_angles) * (180.0 / n_angles)


def _check_angles(angles) -> np.ndarray:
    angles = np.asarray(angles, dtype=np.float64).ravel()
    if angles.size == 0:
        raise ConfigError("empty angle list", field="angles")
    if np.any(angles < 0) or np.any(angles >= 180):
        raise ConfigError("angles must lie in [0, 180)", field="angles")
    if np.any(np.diff(angles) <= 0):
        raise ConfigError("angles must be strictly increasing", field="angles")
    return angles


def n_detectors(size: int) -> int:
    """Detector count covering the image diagonal with a one-bin margin."""
    return int(math.ceil(math.sqrt(2.0) * size)) + 2


def _detector_coords(size: int, angles: np.ndarray, n_det: int, dtype: torch.dtype):
    # Pixel-driven: each pixel centre lands on the detector axis at
    # t = x cos(a) + y sin(a) and splits its value linearly between the two
    # neighbouring bins, so every pixel deposits total weight 1 per angle.
    ii, jj = torch.meshgrid(torch.arange(size, dtype=torch.float64),
                            torch.arange(size, dtype=torch.float64), indexing="ij")
    xs = (jj - (size - 1) / 2.0).reshape(-1)
    ys = ((size - 1) / 2.0 - ii).reshape(-1)
    theta = torch.from_numpy(np.deg2rad(angles))
    t = torch.cos(theta)[:, None] * xs[None] + torch.sin(theta)[:, None] * ys[None] + (n_det - 1) / 2.0
    lower = torch.floor(t)
    frac = (t - lower).to(dtype)
    lower = lower.long() + (torch.arange(len(angles)) * n_det)[:, None]
    return lower.reshape(-1), frac


def ramp_response(n_fft: int, window: str = "ramlak") -> np.ndarray:
    """Frequency response (rfft layout) of the discrete Ram-Lak kernel.

    The kernel is built in the spatial domain (h[0] = 1/4, h[odd n] =
    -1/(pi n)^2) so the DC term is not forced to zero.
    """
    n = np.arange(n_fft)
    n = np.where(n > n_fft // 2, n - n_fft, n)
    h = np.zeros(n_fft)
    h[0] = 0.25
    odd = n % 2 == 1
    h[odd] = -1.0 / (np.pi * n[odd]) ** 2
    resp = np.real(np.fft.rfft(h))
    if window == "hann":
        freq = np.fft.rfftfreq(n_fft)
        resp = resp * 0.5 * (1.0 + np.cos(2.0 * np.pi * freq))
    elif window != "ramlak":
        raise ConfigError(f"unknown filter {window!r}", field="filter")
    return resp


class CTModel(MeasurementModel):
    """Parallel-beam CT with a matrix-free pixel-driven projector and FBP.

    Projection weights are recomputed on every application, ``chunk_angles``
    angles at a time, so memory stays bounded at large sizes. The forward
    pass scatters with ``index_add`` and the adjoint gathers with
    ``index_select``; autograd differentiates each into the other, so the
    pair is an exact transpose.

    ``fbp_weight`` defaults to pi / n_angles, the angular quadrature weight
    of filtered back-projection; a model restricted to a subset of angles
    therefore rescales by (full count / subset count) automatically.
    """

    kind = "ct"
    chunk_angles = 32

    def __init__(self, size: int, angles: Sequence[float], filter: str = "ramlak",
                 fbp_weight: float | None = None):
        if size < 8:
            raise ShapeError(f"image size must be >= 8, got {size}")
        self.size = int(size)
        self.angles = _check_angles(angles)
        self.filter = filter
        self.n_det = n_detectors(self.size)
        self.fbp_weight = math.pi / len(self.angles) if fbp_weight is None else float(fbp_weight)
        self.image_shape = (1, self.size, self.size)
        self.measurement_shape = (len(self.angles), self.n_det)
        self._n_fft = max(64, 1 << int(math.ceil(math.log2(2 * self.n_det))))
        self._filter_resp = ramp_response(self._n_fft, filter)
        self._resp_cache: dict[torch.dtype, torch.Tensor] = {}

    @property
    def n_angles(self) -> int:
        return len(self.angles)

    def restrict(self, angle_indices: Sequence[int]) -> "CTModel":
        """Model that only acquires the given angles (row selection)."""
        idx = np.asarray(angle_indices, dtype=np.int64)
        return CTModel(self.size, self.angles[idx], filter=self.filter)

    def _chunks(self):
        for lo in range(0, self.n_angles, self.chunk_angles):
            yield lo, min(lo + self.chunk_angles, self.n_angles)

    def _check_image(self, x: torch.Tensor):
        if x.ndim != 4 or tuple(x.shape[1:]) != self.image_shape:
            raise ShapeError(f"expected image (B, 1, {self.size}, {self.size}), got {tuple(x.shape)}")

    def _check_sino(self, s: torch.Tensor):
        if s.ndim != 3 or s.shape[1] != self.n_angles:
            got = s.shape[1] if s.ndim == 3 else "?"
            raise ShapeError(f"sinogram has {got} angles, model has {self.n_angles}")
        if s.shape[2] != self.n_det:
            raise ShapeError(f"sinogram has {s.shape[2]} detectors, model has {self.n_det}")

    def apply(self, x: torch.Tensor) -> torch.Tensor:
        self._check_image(x)
        b = x.shape[0]
        flat = x.reshape(b, 1, -1)
        parts = []
        for lo, hi in self._chunks():
            idx, w = _detector_coords(self.size, self.angles[lo:hi], self.n_det, x.dtype)
            out = x.new_zeros(b, (hi - lo) * self.n_det)
            out = out.index_add(1, idx, (flat * (1 - w)).reshape(b, -1))
            out = out.index_add(1, idx + 1, (flat * w).reshape(b, -1))
            parts.append(out)
        return torch.cat(parts, dim=1).reshape(b, self.n_angles, self.n_det)

    def adjoint(self, s: torch.Tensor) -> torch.Tensor:
        self._check_sino(s)
        b = s.shape[0]
        n_pix = self.size * self.size
        img = s.new_zeros(b, n_pix)
        for lo, hi in self._chunks():
            idx, w = _detector_coords(self.size, self.angles[lo:hi], self.n_det, s.dtype)
            block = s[:, lo:hi].reshape(b, -1)
            lower = block.index_select(1, idx).reshape(b, hi - lo, n_pix)
            upper = block.index_select(1, idx + 1).reshape(b, hi - lo, n_pix)
            img = img + (lower * (1 - w) + upper * w).sum(1)
        return img.reshape(b, 1, self.size, self.size)

    def filter_sinogram(self, s: torch.Tensor) -> torch.Tensor:
        if s.dtype not in self._resp_cache:
            self._resp_cache[s.dtype] = torch.from_numpy(self._filter_resp).to(s.dtype)
        spec = torch.fft.rfft(s, n=self._n_fft, dim=-1) * self._resp_cache[s.dtype]
        return torch.fft.irfft(spec, n=self._n_fft, dim=-1)[..., : self.n_det]

    def pinv(self, s: torch.Tensor) -> torch.Tensor:
        """Filtered back-projection."""
        self._check_sino(s)
        return self.fbp_weight * self.adjoint(self.filter_sinogram(s))


def _as_batched_image(image) -> tuple[torch.Tensor, int]:
    x = torch.as_tensor(image)
    if not x.is_floating_point():
        x = x.to(torch.float64)
    ndim = x.ndim
    if ndim == 2:
        x = x[None, None]
    elif ndim == 3:
        x = x[None]
    return x, ndim


def ct_forward(image, angles) -> torch.Tensor:
    """Radon transform of a square image; returns ``(n_angles, n_det)`` for 2-D input."""
    x, ndim = _as_batched_image(image)
    if x.shape[-1] != x.shape[-2]:
        raise ShapeError(f"CT images must be square, got {tuple(x.shape[-2:])}")
    s = CTModel(x.shape[-1], angles).apply(x)
    return s[0] if ndim == 2 else s


def ct_fbp(sino, angles, out_size: int, filter: str = "ramlak") -> torch.Tensor:
    """Filtered back-projection onto an ``out_size`` square grid."""
    s = torch.as_tensor(sino)
    unbatched = s.ndim == 2
    if unbatched:
        s = s[None]
    angles = _check_angles(angles)
    if s.shape[1] != len(angles):
        raise ShapeError(f"sinogram has {s.shape[1]} angles but {len(angles)} were given")
    x = CTModel(out_size, angles, filter=filter).pinv(s)
    return x[0, 0] if unbatched else x


# ---------------------------------------------------------------------------
# MRI


def make_cartesian_mask(shape: tuple[int, int], acceleration: int = 4, acs_lines: int = 16) -> torch.Tensor:
    """Equispaced phase-encode (column) subsampling plus a central ACS band."""
    h, w = shape
    if acceleration < 1:
        raise ConfigError("acceleration must be >= 1", field="acceleration")
    centre = w // 2
    cols = np.zeros(w, dtype=bool)
    cols[(np.arange(w) - centre) % acceleration == 0] = True
    lo = max(0, centre - acs_lines // 2)
    cols[lo: lo + acs_lines] = True
    return torch.from_numpy(np.broadcast_to(cols, (h, w)).copy())


class MRIModel(MeasurementModel):
    """Cartesian multi-coil MRI: k_i = M * F(C_i x).

    The pseudo-inverse combines coils as sum_i conj(C_i) F^-1(M k_i) /
    sum_i |C_i|^2; pixels with no sensitivity are set to zero and counted in
    ``zero_sensitivity_pixels``.
    """

    kind = "mri"
    measurement_is_complex = True

    def __init__(self, maps: torch.Tensor, mask: torch.Tensor):
        maps = torch.as_tensor(maps)
        if maps.ndim != 3:
            raise ShapeError(f"coil maps must be (C, H, W), got {tuple(maps.shape)}")
        if not maps.is_complex():
            maps = maps.to(torch.complex128)
        mask = torch.as_tensor(mask)
        if tuple(mask.shape) != tuple(maps.shape[-2:]):
            raise ShapeError(f"mask {tuple(mask.shape)} does not match grid {tuple(maps.shape[-2:])}")
        h, w = maps.shape[-2:]
        if h < 8 or w < 8:
            raise ShapeError("image grid must be at least 8x8")
        self.maps = maps
        self.mask = mask.to(torch.bool)
        self.n_coils = maps.shape[0]
        self.image_shape = (2, h, w)
        self.measurement_shape = (self.n_coils, h, w)
        sens = (maps.abs() ** 2).sum(0)
        self._support = sens > 1e-12 * float(sens.max()) if float(sens.max()) > 0 else sens > 0
        self.zero_sensitivity_pixels = int((~self._support).sum())
        self._sens = torch.where(self._support, sens, torch.ones_like(sens))
        self._cache: dict[torch.dtype, tuple[torch.Tensor, torch.Tensor, torch.Tensor]] = {}

    def _consts(self, dtype: torch.dtype):
        rdt = _real_dtype(dtype)
        if rdt not in self._cache:
            self._cache[rdt] = (
                self.maps.to(_complex_dtype(rdt)),
                self.mask.to(rdt),
                self._sens.to(rdt),
            )
        return self._cache[rdt]

    def _check_image(self, x):
        if x.ndim != 4 or tuple(x.shape[1:]) != self.image_shape:
            raise ShapeError(f"expected image (B, 2, H, W) matching {self.image_shape}, got {tuple(x.shape)}")

    def _check_kspace(self, k):
        if k.ndim != 4 or tuple(k.shape[1:]) != self.measurement_shape:
            raise ShapeError(f"expected k-space (B, {self.n_coils}, H, W), got {tuple(k.shape)}")

    def apply(self, x: torch.Tensor) -> torch.Tensor:
        self._check_image(x)
        maps, mask, _ = self._consts(x.dtype)
        coil_imgs = to_complex(x)[:, None] * maps[None]
        return fft2c(coil_imgs) * mask

    def _combine(self, k: torch.Tensor) -> torch.Tensor:
        maps, mask, _ = self._consts(k.dtype)
        return (maps.conj()[None] * ifft2c(k * mask)).sum(1)

    def adjoint(self, k: torch.Tensor) -> torch.Tensor:
        self._check_kspace(k)
        return to_channels(self._combine(k))

    def pinv(self, k: torch.Tensor) -> torch.Tensor:
        self._check_kspace(k)
        _, _, sens = self._consts(k.dtype)
        img = self._combine(k) / sens
        img = torch.where(self._support, img, torch.zeros_like(img))
        return to_channels(img)

    def with_maps(self, maps: torch.Tensor) -> "MRIModel":
        return MRIModel(maps, self.mask)


def _as_complex_image(image) -> tuple[torch.Tensor, bool]:
    x = torch.as_tensor(image)
    if x.is_complex():
        unbatched = x.ndim == 2
        return (to_channels(x[None] if unbatched else x), unbatched)
    if x.ndim == 3:
        return x[None], True
    return x, False


def mri_forward(image, maps, mask) -> torch.Tensor:
    """Masked per-coil centred FFT of the sensitivity-weighted image.

    ``image`` may be a complex ``(H, W)`` array or real ``(2, H, W)`` /
    ``(B, 2, H, W)`` planes.
    """
    x, unbatched = _as_complex_image(image)
    maps = torch.as_tensor(maps)
    if tuple(maps.shape[-2:]) != tuple(x.shape[-2:]):
        raise ShapeError(f"coil maps {tuple(maps.shape[-2:])} do not match image {tuple(x.shape[-2:])}")
    k = MRIModel(maps, mask).apply(x.to(_real_dtype(maps.dtype) if maps.is_complex() else x.dtype))
    return k[0] if unbatched else k


def mri_pinv(k, maps, mask=None) -> torch.Tensor:
    """Zero-filled SENSE-style combination; returns complex ``(H, W)`` for unbatched input."""
    k = torch.as_tensor(k)
    unbatched = k.ndim == 3
    if unbatched:
        k = k[None]
    maps = torch.as_tensor(maps)
    if k.shape[1] != maps.shape[0]:
        raise ShapeError(f"k-space has {k.shape[1]} coils but maps have {maps.shape[0]}")
    if mask is None:
        mask = torch.ones(maps.shape[-2:], dtype=torch.bool)
    x = MRIModel(maps, mask).pinv(k)
    return to_complex(x)[0] if unbatched else x


# ---------------------------------------------------------------------------


def adjoint_test(model: MeasurementModel, trials: int = 10,
                 rng: np.random.Generator | int | None = None,
                 dtype: torch.dtype = torch.float64) -> float:
    """Largest normalised defect |<Ax, y> - <x, A^H y>| / (|Ax| |y|) over random pairs."""
    if trials < 1:
        raise ConfigError("trials must be >= 1", field="trials")
    gen = np.random.default_rng(rng)
    worst = 0.0
    with torch.no_grad():
        for _ in range(trials):
            x = model.random_image(gen, dtype=dtype)
            y = model.random_measurement(gen, dtype=dtype)
            ax = model.apply(x)
            lhs = float(real_inner(ax, y))
            rhs = float(real_inner(x, model.adjoint(y)))
            scale = float(torch.sqrt(sq_norm(ax) * sq_norm(y)))
            if scale > 0:
                worst = max(worst, abs(lhs - rhs) / scale)
    return worst

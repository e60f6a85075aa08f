"""Sketch operators: CT angle partitions, coil subsampling, PCA coil compression
with structured coil sketching, and dense random sketches."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from .errors import ConfigError, DataError, ShapeError
from .linops import CTModel, MeasurementModel, MRIModel

SKETCH_KINDS = ("angle-partition", "classical-coil", "coil-sketch", "gaussian", "rademacher-dense")


@dataclass(frozen=True)
class SketchPlan:
    """Declarative description of one sketch family.

    ``n_sketched`` is the number of Rademacher-mixed low-energy virtual
    coils (the coil-sketch ``S``); ``rows`` is the dense-sketch size ``m``.
    """

    kind: str
    n_batches: int | None = None
    n_keep: int | None = None
    n_virtual: int | None = None
    n_retained: int | None = None
    n_sketched: int | None = None
    rows: int | None = None
    isotropic: bool = False
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self, n_coils: int | None = None, n_angles: int | None = None):
        if self.kind not in SKETCH_KINDS:
            raise ConfigError(f"unknown sketch kind {self.kind!r}", field="kind")
        required = {
            "angle-partition": ("n_batches",),
            "classical-coil": ("n_keep",),
            "coil-sketch": ("n_virtual", "n_retained", "n_sketched"),
            "gaussian": ("rows",),
            "rademacher-dense": ("rows",),
        }[self.kind]
        for name in required:
            value = getattr(self, name)
            if value is None:
                raise ConfigError(f"required for {self.kind} sketches", field=name)
            if value < (0 if name in ("n_retained", "n_sketched") else 1):
                raise ConfigError(f"must be positive, got {value}", field=name)
        if self.kind == "coil-sketch":
            if self.n_retained + self.n_sketched < 1:
                raise ConfigError("sketch must keep at least one coil", field="n_sketched")
            if self.n_retained + self.n_sketched > self.n_virtual:
                raise ConfigError("R + S must not exceed L", field="n_sketched")
            if n_coils is not None and self.n_virtual > n_coils:
                raise ConfigError(f"L={self.n_virtual} exceeds coil count {n_coils}", field="n_virtual")
        if self.kind == "classical-coil" and n_coils is not None and self.n_keep > n_coils:
            raise ConfigError(f"n_keep={self.n_keep} exceeds coil count {n_coils}", field="n_keep")
        if self.kind == "angle-partition" and n_angles is not None and self.n_batches > n_angles:
            raise ConfigError(f"n_batches={self.n_batches} exceeds n_angles={n_angles}", field="n_batches")

    def to_dict(self) -> dict:
        return {k: v for k, v in asdict(self).items() if v is not None}

    @classmethod
    def from_dict(cls, data: dict) -> "SketchPlan":
        return cls(**data)


# ---------------------------------------------------------------------------
# CT angle partitions


@dataclass(frozen=True)
class AnglePartition:
    n_angles: int
    n_batches: int
    batches: tuple[np.ndarray, ...] = field(repr=False)


def make_angle_partition(n_angles: int, n_batches: int) -> AnglePartition:
    """Interleaved partition: batch i holds angle indices i, i+N, i+2N, ..."""
    if n_angles < 1:
        raise ConfigError("need at least one angle", field="n_angles")
    if not 1 <= n_batches <= n_angles:
        raise ConfigError(f"n_batches must be in [1, {n_angles}], got {n_batches}", field="n_batches")
    batches = tuple(np.arange(i, n_angles, n_batches) for i in range(n_batches))
    return AnglePartition(n_angles, n_batches, batches)


def sample_batch(partition: AnglePartition, rng: np.random.Generator) -> int:
    """Uniform batch index; consumes exactly one draw from ``rng``."""
    return int(rng.integers(partition.n_batches))


@dataclass
class SketchedModel:
    """A sketched operator with its sketched data.

    ``model`` supplies A_S (``apply``) and A_S^dagger (``pinv``); ``y`` is y_S.
    """

    model: MeasurementModel
    y: torch.Tensor | None
    batch: int | None = None
    matrix: np.ndarray | None = None
    coils: np.ndarray | None = None


def select_rows(y: torch.Tensor, partition: AnglePartition, batch: int) -> torch.Tensor:
    return y[:, torch.from_numpy(partition.batches[batch])]


def restrict_model(model: CTModel, partition: AnglePartition, batch: int,
                   y: torch.Tensor | None = None) -> SketchedModel:
    """Keep only the angles of ``batch``; FBP over the subset uses weight pi/|batch|."""
    if not isinstance(model, CTModel):
        raise ConfigError("angle partitions apply to CT models only", field="kind")
    if model.n_angles != partition.n_angles:
        raise ShapeError(f"partition covers {partition.n_angles} angles, model has {model.n_angles}")
    if not 0 <= batch < partition.n_batches:
        raise ConfigError(f"batch {batch} out of range", field="batch")
    sub = model if partition.n_batches == 1 else model.restrict(partition.batches[batch])
    y_s = None if y is None else select_rows(y, partition, batch)
    return SketchedModel(sub, y_s, batch=batch)


def subsampling_matrix(partition: AnglePartition, batch: int, rows_per_angle: int = 1,
                       isotropic: bool = False) -> np.ndarray:
    """Dense row-selection sketch S_i for ``batch``.

    With ``isotropic`` the rows are scaled by sqrt(N), so that a uniformly
    drawn batch satisfies E[S^T S] = I. Training losses use the unscaled form.
    """
    idx = partition.batches[batch]
    rows = (idx[:, None] * rows_per_angle + np.arange(rows_per_angle)[None, :]).ravel()
    s = np.zeros((rows.size, partition.n_angles * rows_per_angle))
    s[np.arange(rows.size), rows] = 1.0
    return s * np.sqrt(partition.n_batches) if isotropic else s


# ---------------------------------------------------------------------------
# Coil compression and coil sketching


@dataclass
class CoilCompression:
    """PCA coil compression result.

    ``matrix`` is Q_L (C x L, complex, orthonormal columns); ``eigenvalues``
    lists all C covariance eigenvalues in descending order; ``kspace`` holds
    the L virtual coils; ``maps`` the matching virtual-coil sensitivities
    when physical maps were supplied.
    """

    matrix: np.ndarray
    eigenvalues: np.ndarray
    kspace: torch.Tensor
    maps: torch.Tensor | None = None

    @property
    def n_virtual(self) -> int:
        return self.matrix.shape[1]


def coil_covariance(k: torch.Tensor, mask: torch.Tensor | None = None) -> tuple[np.ndarray, int]:
    """Covariance of mean-subtracted coil samples, v_ij = conj(k_i)^T k_j / (n - 1).

    Means are taken over masked-in samples only.
    """
    arr = k.detach().cpu().numpy().astype(np.complex128)
    if arr.ndim == 4:
        if arr.shape[0] != 1:
            raise ShapeError("coil compression expects a single k-space stack")
        arr = arr[0]
    if not np.all(np.isfinite(arr)):
        raise DataError("k-space contains non-finite values")
    n_coils = arr.shape[0]
    if mask is None:
        sel = np.any(arr != 0, axis=0)
    else:
        sel = np.broadcast_to(mask.cpu().numpy().astype(bool), arr.shape[1:])
    samples = arr[:, sel].T  # n x C
    n = samples.shape[0]
    if n < 2:
        raise DataError("need at least two sampled k-space locations")
    centred = samples - samples.mean(axis=0, keepdims=True)
    cov = centred.conj().T @ centred / (n - 1)
    assert cov.shape == (n_coils, n_coils)
    return cov, n


def coil_compress(k: torch.Tensor, n_virtual: int, mask: torch.Tensor | None = None,
                  maps: torch.Tensor | None = None) -> CoilCompression:
    """Project ``k`` (C, H, W) or (1, C, H, W) onto its top ``n_virtual`` principal coils."""
    n_coils = k.shape[-3]
    if not 1 <= n_virtual <= n_coils:
        raise ConfigError(f"L must be in [1, {n_coils}], got {n_virtual}", field="n_virtual")
    cov, _ = coil_covariance(k, mask)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1]
    evals, evecs = evals[order], evecs[:, order]
    q = evecs[:, :n_virtual]
    q_t = torch.from_numpy(q).to(k.dtype)
    compressed = torch.einsum("...chw,cl->...lhw", k, q_t)
    comp_maps = None if maps is None else compress_maps(maps, q)
    return CoilCompression(q, evals, compressed, comp_maps)


def compress_maps(maps: torch.Tensor, q: np.ndarray) -> torch.Tensor:
    """Virtual-coil sensitivities sum_c Q[c, l] C_c, consistent with k . Q."""
    return torch.einsum("chw,cl->lhw", maps, torch.from_numpy(q).to(maps.dtype))


def build_coil_sketch_matrix(n_virtual: int, n_retained: int, n_sketched: int,
                             rng: np.random.Generator) -> np.ndarray:
    """Block sketch [[I_R, 0], [0, Rademacher(S x (L - R))]] of shape (R + S) x L."""
    if n_retained < 0 or n_sketched < 0:
        raise ConfigError("R and S must be non-negative", field="n_sketched")
    if n_retained + n_sketched > n_virtual:
        raise ConfigError(f"R + S = {n_retained + n_sketched} exceeds L = {n_virtual}", field="n_sketched")
    out = np.zeros((n_retained + n_sketched, n_virtual))
    out[:n_retained, :n_retained] = np.eye(n_retained)
    block = rng.integers(0, 2, size=(n_sketched, n_virtual - n_retained)) * 2 - 1
    out[n_retained:, n_retained:] = block
    return out


def sketch_mri_model(model: MRIModel, compression: CoilCompression, sketch: np.ndarray) -> SketchedModel:
    """Sketched maps C_S = S~ C_L and data y_S = S~ k_L over the same mask."""
    if compression.maps is None:
        raise ConfigError("compression carries no sensitivity maps", field="maps")
    if sketch.ndim != 2 or sketch.shape[1] != compression.n_virtual:
        raise ShapeError(f"sketch has {sketch.shape[-1]} columns, expected L = {compression.n_virtual}")
    maps = compression.maps
    s_t = torch.from_numpy(sketch)
    maps_s = torch.einsum("sl,lhw->shw", s_t.to(maps.dtype), maps)
    k = compression.kspace
    y_s = torch.einsum("sl,...lhw->...shw", s_t.to(k.dtype), k)
    if y_s.ndim == 3:
        y_s = y_s[None]
    return SketchedModel(model.with_maps(maps_s), y_s, matrix=sketch)


def classical_coil_sketch(model: MRIModel, n_keep: int, rng: np.random.Generator,
                          y: torch.Tensor | None = None) -> SketchedModel:
    """Uniformly pick ``n_keep`` distinct physical coils."""
    if not 1 <= n_keep <= model.n_coils:
        raise ConfigError(f"n_keep must be in [1, {model.n_coils}], got {n_keep}", field="n_keep")
    coils = np.sort(rng.choice(model.n_coils, size=n_keep, replace=False))
    if n_keep == model.n_coils:
        return SketchedModel(model, y, coils=coils)
    idx = torch.from_numpy(coils)
    sub = model.with_maps(model.maps[idx])
    return SketchedModel(sub, None if y is None else y[:, idx], coils=coils)


# ---------------------------------------------------------------------------
# Dense sketches for the approximation-bound studies


def make_gaussian_sketch(m: int, n: int, rng: np.random.Generator) -> np.ndarray:
    """i.i.d. N(0, 1/m) entries, so E[S^T S] = I."""
    if m < 1 or n < 1:
        raise ConfigError("sketch dimensions must be positive", field="rows")
    return rng.standard_normal((m, n)) / np.sqrt(m)


def make_rademacher_sketch(m: int, n: int, rng: np.random.Generator) -> np.ndarray:
    """i.i.d. +-1/sqrt(m) entries, so E[S^T S] = I."""
    if m < 1 or n < 1:
        raise ConfigError("sketch dimensions must be positive", field="rows")
    return (rng.integers(0, 2, size=(m, n)) * 2 - 1) / np.sqrt(m)

"""Sketch deviation norms, operator spectra, Lipschitz probes and image metrics."""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np
import torch

from .errors import ConfigError, ConvergenceError, DataError, ShapeError
from .linops import MeasurementModel
from .sketch import make_gaussian_sketch, make_rademacher_sketch

log = logging.getLogger(__name__)

PSNR_CAP = 99.0
DENSE_LIMIT = 512


# ---------------------------------------------------------------------------
# Metrics


def _as_numpy(a) -> np.ndarray:
    if isinstance(a, torch.Tensor):
        return a.detach().cpu().numpy()
    return np.asarray(a)


def mse(x, ref) -> float:
    x, ref = _as_numpy(x), _as_numpy(ref)
    if x.shape != ref.shape:
        raise ShapeError(f"shape mismatch {x.shape} vs {ref.shape}")
    return float(np.mean(np.abs(x.astype(np.float64) - ref.astype(np.float64)) ** 2))


def psnr(x, ref, peak: float | None = None) -> float:
    """10 log10(peak^2 / mse), capped at 99 dB; ``peak`` defaults to max(ref)."""
    err = mse(x, ref)
    if peak is None:
        peak = float(np.max(np.abs(_as_numpy(ref))))
    if peak <= 0:
        raise ConfigError("peak must be positive", field="peak")
    if err == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(peak * peak / err))


# ---------------------------------------------------------------------------
# Power iteration


def symmetry_defect(op: Callable[[np.ndarray], np.ndarray], dim: int,
                    rng: np.random.Generator | int | None = None, trials: int = 3) -> float:
    """Largest |<op x, y> - <x, op y>| / (|op x| |y| + |x| |op y|) over random pairs."""
    gen = np.random.default_rng(rng)
    worst = 0.0
    for _ in range(trials):
        x, y = gen.standard_normal(dim), gen.standard_normal(dim)
        ox, oy = op(x), op(y)
        scale = np.linalg.norm(ox) * np.linalg.norm(y) + np.linalg.norm(x) * np.linalg.norm(oy)
        if scale > 0:
            worst = max(worst, abs(ox @ y - x @ oy) / scale)
    return float(worst)


def spectral_norm(op: Callable[[np.ndarray], np.ndarray], dim: int, tol: float = 1e-10,
                  max_iter: int = 20000, rng: np.random.Generator | int | None = None) -> float:
    """Largest eigenvalue magnitude of a symmetric operator by power iteration.

    Stops when the estimate changes by less than ``tol`` relative between
    iterations. Raises :class:`ConvergenceError` carrying the last iterate.
    """
    if tol <= 0:
        raise ConfigError("tol must be positive", field="tol")
    gen = np.random.default_rng(rng)
    v = gen.standard_normal(dim)
    v /= np.linalg.norm(v)
    est = 0.0
    for _ in range(max_iter):
        w = op(v)
        new = float(np.linalg.norm(w))
        if new == 0.0:
            return 0.0
        v = w / new
        if abs(new - est) <= tol * new:
            return new
        est = new
    raise ConvergenceError(f"power iteration did not converge in {max_iter} iterations",
                           last_iterate=v, last_estimate=est)


# ---------------------------------------------------------------------------
# Sketch deviation ||A^T (S^T S - I) A||_2


def _matvecs(A):
    """(matvec, rmatvec, n_rows, n_cols) for a dense matrix or an object with matvec/rmatvec/shape."""
    if isinstance(A, np.ndarray) or isinstance(A, (list, tuple)):
        mat = np.atleast_2d(np.asarray(A, dtype=np.float64))
        return (lambda v: mat @ v), (lambda u: mat.T @ u), mat.shape[0], mat.shape[1]
    if hasattr(A, "matvec") and hasattr(A, "rmatvec") and hasattr(A, "shape"):
        return A.matvec, A.rmatvec, A.shape[0], A.shape[1]
    raise ConfigError("A must be a matrix or provide matvec/rmatvec/shape", field="A")


def deviation_operator(A, S: np.ndarray) -> tuple[Callable[[np.ndarray], np.ndarray], int]:
    """Symmetric map v -> A^T (S^T S - I) A v and its dimension."""
    mv, rmv, n, d = _matvecs(A)
    S = np.atleast_2d(np.asarray(S, dtype=np.float64))
    if S.shape[1] != n:
        raise ShapeError(f"sketch has {S.shape[1]} columns, A has {n} rows")
    if isinstance(A, np.ndarray) and d <= DENSE_LIMIT:
        SA = S @ A
        M = SA.T @ SA - A.T @ A
        return (lambda v: M @ v), d

    def op(v):
        av = mv(v)
        return rmv(S.T @ (S @ av) - av)

    return op, d


def sketch_deviation(A, S: np.ndarray, rng: np.random.Generator | int | None = 0,
                     tol: float = 1e-10) -> float:
    op, d = deviation_operator(A, S)
    return spectral_norm(op, d, tol=tol, rng=rng)


def lowrank_deviation(U: np.ndarray, S: np.ndarray, rng: np.random.Generator | int | None = 0,
                      tol: float = 1e-10) -> float:
    """||U^T (S^T S - I) U||_2 for a basis with orthonormal columns."""
    U = np.atleast_2d(np.asarray(U, dtype=np.float64))
    gram_err = np.max(np.abs(U.T @ U - np.eye(U.shape[1])))
    if gram_err > 1e-8:
        raise DataError(f"U is not semi-unitary (max |U^T U - I| = {gram_err:.2e})")
    return sketch_deviation(U, S, rng=rng, tol=tol)


_FAMILIES = {"gaussian": make_gaussian_sketch, "rademacher": make_rademacher_sketch}


@dataclass
class DeviationEstimate:
    m: int
    trials: int
    median: float
    mean: float
    max: float
    values: list[float] = field(default_factory=list, repr=False)

    def to_dict(self) -> dict:
        out = asdict(self)
        out.pop("values")
        return out


@dataclass
class ScalingStudy:
    estimates: list[DeviationEstimate]
    slope: float
    intercept: float

    @property
    def medians(self) -> np.ndarray:
        return np.array([e.median for e in self.estimates])

    def monotone(self) -> bool:
        return bool(np.all(np.diff(self.medians) < 0))


def fit_loglog(m_list, values) -> tuple[float, float]:
    """Least-squares (slope, intercept) of log(values) against log(m)."""
    x, y = np.log(np.asarray(m_list, float)), np.log(np.asarray(values, float))
    slope, intercept = np.polyfit(x, y, 1)
    return float(slope), float(intercept)


def deviation_scaling_study(A, sketch_family: str, m_list, trials: int,
                            rng: np.random.Generator | int | None = 0,
                            deviation: Callable = sketch_deviation) -> ScalingStudy:
    """Deviation statistics per sketch size plus the log-log slope of the medians.

    Each m draws from its own child stream of ``rng``.
    """
    if sketch_family not in _FAMILIES:
        raise ConfigError(f"unknown sketch family {sketch_family!r}", field="sketch_family")
    m_list = [int(m) for m in m_list]
    if any(b <= a for a, b in zip(m_list, m_list[1:])):
        raise ConfigError("m_list must be strictly ascending", field="m_list")
    if trials < 20:
        raise ConfigError("trials must be >= 20", field="trials")
    n = _matvecs(A)[2]
    gen = np.random.default_rng(rng)
    draw = _FAMILIES[sketch_family]
    estimates = []
    for m, child in zip(m_list, gen.spawn(len(m_list))):
        vals = [deviation(A, draw(m, n, child), rng=child) for _ in range(trials)]
        arr = np.array(vals)
        estimates.append(DeviationEstimate(m, trials, float(np.median(arr)), float(arr.mean()),
                                           float(arr.max()), vals))
    medians = [e.median for e in estimates]
    if min(medians) > 0:
        slope, intercept = fit_loglog(m_list, medians)
    else:
        slope, intercept = float("nan"), float("nan")
    return ScalingStudy(estimates, slope, intercept)


def random_lowrank_basis(n: int, k: int, rng: np.random.Generator) -> np.ndarray:
    q, _ = np.linalg.qr(rng.standard_normal((n, k)))
    return q


def verify_theory(rows: int = 256, cols: int = 64, m_list=(8, 16, 32, 64, 128, 256),
                  trials: int = 50, rank: int = 4, seed: int = 0) -> dict:
    """Gaussian-sketch scaling study on a random A and a rank-``rank`` comparison.

    The generic matrix is normalised to unit spectral norm so both studies
    share the same scale.
    """
    gen = np.random.default_rng(seed)
    a_gen, u_gen, generic_rng, lowrank_rng = gen.spawn(4)
    A = a_gen.standard_normal((rows, cols))
    A /= np.linalg.norm(A, 2)
    U = random_lowrank_basis(rows, rank, u_gen)
    generic = deviation_scaling_study(A, "gaussian", m_list, trials, generic_rng)
    lowrank = deviation_scaling_study(U, "gaussian", m_list, trials, lowrank_rng,
                                      deviation=lowrank_deviation)
    below = [bool(lo < g) for lo, g in zip(lowrank.medians, generic.medians)]
    return {
        "rows": rows, "cols": cols, "rank": rank, "trials": trials, "seed": seed,
        "m": list(m_list),
        "generic_median": generic.medians.tolist(),
        "lowrank_median": lowrank.medians.tolist(),
        "slope": generic.slope,
        "intercept": generic.intercept,
        "lowrank_slope": lowrank.slope,
        "monotone": generic.monotone(),
        "lowrank_below": below,
        "slope_in_range": bool(-0.65 <= generic.slope <= -0.35),
    }


# ---------------------------------------------------------------------------
# Operator spectra


@dataclass
class SpectrumProfile:
    singular_values: np.ndarray
    effective_rank: int
    threshold: float
    note: str

    def to_dict(self) -> dict:
        return {"singular_values": self.singular_values.tolist(), "effective_rank": self.effective_rank,
                "threshold": self.threshold, "note": self.note}


def _model_maps(model: MeasurementModel):
    img_shape = model.image_shape

    def fwd(X: np.ndarray) -> np.ndarray:  # X: (d, k)
        x = torch.from_numpy(np.ascontiguousarray(X.T)).reshape(X.shape[1], *img_shape)
        with torch.no_grad():
            y = model.apply(x)
        y = torch.view_as_real(y) if y.is_complex() else y
        return y.reshape(X.shape[1], -1).numpy().T

    def adj(Y: np.ndarray) -> np.ndarray:
        k = Y.shape[1]
        y = torch.from_numpy(np.ascontiguousarray(Y.T))
        if model.measurement_is_complex:
            y = torch.view_as_complex(y.reshape(k, *model.measurement_shape, 2).contiguous())
        else:
            y = y.reshape(k, *model.measurement_shape)
        with torch.no_grad():
            x = model.adjoint(y)
        return x.reshape(k, -1).numpy().T

    return fwd, adj


def _randomized_svals(fwd, adj, d: int, k: int, rng: np.random.Generator,
                      oversample: int = 10, power_iters: int = 10) -> np.ndarray:
    omega = rng.standard_normal((d, k + oversample))
    Q, _ = np.linalg.qr(fwd(omega))
    for _ in range(power_iters):
        Z, _ = np.linalg.qr(adj(Q))
        Q, _ = np.linalg.qr(fwd(Z))
    B = adj(Q).T
    return np.linalg.svd(B, compute_uv=False)[:k]


def spectrum_profile(model, n_singular: int = 20, tau: float = 1e-3,
                     rng: np.random.Generator | int | None = 0) -> SpectrumProfile:
    """Leading singular values of a dense matrix or a measurement model.

    Dimensions up to 512 use a dense SVD; larger operators use a randomized
    SVD with 10 power iterations.
    """
    gen = np.random.default_rng(rng)
    if isinstance(model, MeasurementModel):
        fwd, adj = _model_maps(model)
        d = int(np.prod(model.image_shape))
        if d <= DENSE_LIMIT:
            svals = np.linalg.svd(fwd(np.eye(d)), compute_uv=False)
        else:
            k = min(n_singular, d)
            svals = _randomized_svals(fwd, adj, d, k, gen, oversample=max(10, k))
    else:
        svals = np.linalg.svd(np.atleast_2d(np.asarray(model, dtype=np.float64)), compute_uv=False)
    svals = np.sort(np.abs(svals))[::-1][:n_singular]
    top = svals[0] if svals.size else 0.0
    eff = int(np.sum(svals >= tau * top)) if top > 0 else 0
    if top == 0:
        note = "zero operator"
    elif svals[-1] >= (1 - 1e-9) * top:
        note = "flat"
    elif svals[-1] < 0.1 * top:
        note = "fast-decaying"
    else:
        note = "slowly decaying"
    return SpectrumProfile(svals, eff, tau, note)


# ---------------------------------------------------------------------------
# Lipschitz probe


def _eval_preserving_stats(net, x: torch.Tensor) -> torch.Tensor:
    """Forward pass that leaves normalisation running statistics untouched."""
    if not isinstance(net, torch.nn.Module):
        return net(x)
    saved = {k: v.clone() for k, v in net.named_buffers()}
    try:
        with torch.no_grad():
            return net(x)
    finally:
        with torch.no_grad():
            for k, v in net.named_buffers():
                v.copy_(saved[k])


def lipschitz_probe(net, samples, rng: np.random.Generator | int | None = 0,
                    shape: tuple[int, ...] = (1, 1, 16, 16), scale: float = 1.0) -> float:
    """max ||F(p) - F(q)|| / ||p - q|| over all pairs of probe inputs.

    ``samples`` is either a count of random N(0, scale^2) inputs of ``shape``
    or a sequence of input tensors. The result lower-bounds the Lipschitz
    constant. Each input is evaluated on its own.
    """
    gen = np.random.default_rng(rng)
    if isinstance(samples, int):
        if samples < 2:
            raise ConfigError("need at least two samples", field="samples")
        inputs = [torch.from_numpy(scale * gen.standard_normal(shape)) for _ in range(samples)]
    else:
        inputs = list(samples)
        if len(inputs) < 2:
            raise ConfigError("need at least two samples", field="samples")
    if isinstance(net, torch.nn.Module):
        dtype = next(net.parameters()).dtype if any(True for _ in net.parameters()) else inputs[0].dtype
        inputs = [p.to(dtype) for p in inputs]
    outputs = [_eval_preserving_stats(net, p) for p in inputs]
    best = 0.0
    for i, j in itertools.combinations(range(len(inputs)), 2):
        den = float(torch.linalg.vector_norm(inputs[i] - inputs[j]))
        if den > 0:
            best = max(best, float(torch.linalg.vector_norm(outputs[i] - outputs[j])) / den)
    return best


# ---------------------------------------------------------------------------
# Sandwich check for the sketched EI term


def sandwich_check(net, A: np.ndarray, v: torch.Tensor, m: int, draws: int = 100,
                   lipschitz: float | None = None, rng: np.random.Generator | int | None = 0) -> dict:
    """Compare ||v - F(A_S^+ A_S v)|| with ||v - F(A^+ A v)|| over Gaussian sketches.

    ``A`` is a dense (n, d) matrix acting on flattened ``v``. The bound is
    L r delta with L from :func:`lipschitz_probe` (a lower bound, so the
    check is advisory), r = ||v|| and delta the measured deviation norm of
    each draw. Returns the gaps, the bounds and the fraction within bound.
    """
    gen = np.random.default_rng(rng)
    A = np.asarray(A, dtype=np.float64)
    shape = tuple(v.shape)
    vec = v.detach().reshape(-1).cpu().numpy().astype(np.float64)
    if A.shape[1] != vec.size:
        raise ShapeError(f"A has {A.shape[1]} columns, v has {vec.size} entries")

    def residual(proj: np.ndarray) -> float:
        inp = torch.from_numpy(proj @ vec).reshape(shape).to(v.dtype)
        out = _eval_preserving_stats(net, inp)
        return float(torch.linalg.vector_norm(v.detach() - out))

    full = residual(np.linalg.pinv(A) @ A)
    if lipschitz is None:
        probes = [v.detach() + 0.1 * torch.from_numpy(gen.standard_normal(shape)).to(v.dtype) for _ in range(6)]
        lipschitz = lipschitz_probe(net, probes)
    r = float(np.linalg.norm(vec))
    gaps, bounds = [], []
    for _ in range(draws):
        S = make_gaussian_sketch(m, A.shape[0], gen)
        SA = S @ A
        gaps.append(abs(residual(np.linalg.pinv(SA) @ SA) - full))
        bounds.append(lipschitz * r * sketch_deviation(A, S, rng=gen))
    gaps, bounds = np.array(gaps), np.array(bounds)
    within = float(np.mean(gaps <= bounds))
    log.info("sandwich check m=%d: %.0f%% of %d draws within L r delta", m, 100 * within, draws)
    return {"m": m, "full_residual": full, "lipschitz": lipschitz, "r": r,
            "gaps": gaps.tolist(), "bounds": bounds.tolist(), "fraction_within": within}

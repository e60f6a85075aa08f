"""Training and adaptation loops: DIP, EI, sketched EI, BN-only adaptation and
coil-sketched multi-coil MRI EI."""

from __future__ import annotations

import logging
import math
import platform
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Protocol

import numpy as np
import torch

from .analysis import _eval_preserving_stats, psnr
from .config import ExperimentConfig
from .errors import ConfigError, DataError
from .groupact import RotationGroup, sample_group
from .io import ingest_image, ingest_kspace, read_array
from .linops import CTModel, MeasurementModel, MRIModel, ifft2c, make_cartesian_mask, sq_norm, to_complex, uniform_angles
from .netmodel import UNet, UNetSpec, count_parameters, load_checkpoint, save_checkpoint, select_parameters
from .objectives import LossBreakdown, ei_loss, rei_sketched_loss, sketched_ei_loss
from .phantoms import complex_phantom, make_coil_maps, make_phantom, random_ellipses
from .sketch import (build_coil_sketch_matrix, classical_coil_sketch, coil_compress, make_angle_partition,
                     restrict_model, sample_batch, sketch_mri_model)

log = logging.getLogger(__name__)

RECORD_FIELDS = ("iter", "wall_time_s", "mc", "ei", "total", "psnr")


def _dtype(cfg: ExperimentConfig) -> torch.dtype:
    return torch.float64 if cfg.dtype == "float64" else torch.float32


def _cdtype(cfg: ExperimentConfig) -> torch.dtype:
    return torch.complex128 if cfg.dtype == "float64" else torch.complex64


# ---------------------------------------------------------------------------
# Run outputs


@dataclass
class TrainRun:
    records: list[dict] = field(default_factory=list)
    state: dict | None = None
    recon: torch.Tensor | None = None
    manifest: dict = field(default_factory=dict)
    aborted: bool = False
    diagnostic: dict | None = None
    trainable_params: int = 0
    total_params: int = 0
    net: UNet | None = field(default=None, repr=False)

    @property
    def iterations(self) -> int:
        return len(self.records)

    def trace(self, key: str = "total") -> np.ndarray:
        return np.array([r[key] for r in self.records], dtype=float)

    @property
    def final_psnr(self) -> float | None:
        return self.records[-1]["psnr"] if self.records else None

    def seconds_per_iteration(self) -> float:
        if not self.records:
            return float("nan")
        return self.records[-1]["wall_time_s"] / len(self.records)


# ---------------------------------------------------------------------------
# Problem setup


class SensitivityProvider(Protocol):
    def __call__(self, kspace: torch.Tensor, mask: torch.Tensor) -> torch.Tensor: ...


@dataclass
class PrecomputedMaps:
    maps: torch.Tensor

    def __call__(self, kspace, mask):
        if tuple(self.maps.shape) != tuple(kspace.shape[-3:]):
            raise DataError(f"maps {tuple(self.maps.shape)} do not match k-space {tuple(kspace.shape[-3:])}")
        return self.maps


@dataclass
class AcsMaps:
    """Low-pass coil images from the fully sampled central columns, normalised
    pixelwise by their root sum of squares."""

    acs_lines: int = 16
    floor: float = 1e-3

    def __call__(self, kspace, mask):
        k = kspace[0] if kspace.ndim == 4 else kspace
        w = k.shape[-1]
        lo = max(0, w // 2 - self.acs_lines // 2)
        window = torch.zeros(w, dtype=torch.float64)
        n = min(self.acs_lines, w - lo)
        if n < 1:
            raise DataError("no autocalibration lines available")
        window[lo:lo + n] = torch.from_numpy(np.hanning(n + 2)[1:-1])
        imgs = ifft2c(k * window.to(k.real.dtype))
        rss = imgs.abs().pow(2).sum(0).sqrt()
        keep = rss > self.floor * rss.max()
        return torch.where(keep, imgs / torch.where(keep, rss, torch.ones_like(rss)), torch.zeros_like(imgs))


@dataclass
class Problem:
    task: str
    model: MeasurementModel
    y: torch.Tensor
    z: torch.Tensor
    reference: torch.Tensor | None
    maps: torch.Tensor | None = None
    in_channels: int = 1

    def quality(self, x: torch.Tensor) -> float | None:
        if self.reference is None:
            return None
        if self.task == "mri":
            return psnr(to_complex(x).abs(), to_complex(self.reference).abs())
        return psnr(x, self.reference)


def _streams(seed: int) -> dict[str, np.random.Generator]:
    names = ("sketch", "group", "noise", "init")
    kids = np.random.SeedSequence(seed).spawn(len(names))
    return {n: np.random.default_rng(s) for n, s in zip(names, kids)}


def _add_noise(y: torch.Tensor, sigma: float, rng: np.random.Generator) -> torch.Tensor:
    if sigma <= 0:
        return y
    shape = tuple(y.shape)
    if y.is_complex():
        noise = rng.standard_normal(shape) + 1j * rng.standard_normal(shape)
    else:
        noise = rng.standard_normal(shape)
    return y + sigma * torch.from_numpy(noise).to(y.dtype)


def build_problem(cfg: ExperimentConfig, image: np.ndarray | None = None) -> Problem:
    """Operator, measurement and network input for a config.

    ``image`` overrides the configured ground truth (real for CT, complex for MRI).
    """
    rng = _streams(cfg.seed)["noise"]
    size = cfg.image_size
    sigma = cfg.data.measurement_noise
    if cfg.task == "ct":
        if image is None:
            image = ingest_image(cfg.data.image_path, size) if cfg.data.image_path else make_phantom(cfg.data.phantom, size)
        x = torch.from_numpy(np.asarray(image, dtype=np.float64)).to(_dtype(cfg))[None, None]
        model = CTModel(size, uniform_angles(cfg.ct.n_angles), filter=cfg.ct.filter)
        with torch.no_grad():
            y = _add_noise(model.apply(x), sigma, rng)
            z = model.pinv(y)
        return Problem("ct", model, y, z, x, in_channels=1)

    m = cfg.mri
    if cfg.data.kspace_path:
        k = torch.from_numpy(ingest_kspace(cfg.data.kspace_path))
        if k.shape[0] != m.n_coils:
            raise DataError(f"k-space has {k.shape[0]} coils, config says {m.n_coils}")
        mask = (k.abs() > 0).any(0).any(0, keepdim=True).expand(k.shape[-2:]).clone()
        if cfg.data.maps_path:
            maps = torch.from_numpy(read_array(cfg.data.maps_path)).to(_cdtype(cfg))
        else:
            maps = AcsMaps(m.acs_lines)(k, mask).to(_cdtype(cfg))
        model = MRIModel(maps, mask)
        y = _add_noise(k[None] * mask, sigma, rng)
        with torch.no_grad():
            z = model.pinv(y)
        return Problem("mri", model, y, z, None, maps=maps, in_channels=2)

    if image is None:
        image = complex_phantom(cfg.data.phantom, size)
    x = torch.from_numpy(np.stack([image.real, image.imag])).to(_dtype(cfg))[None]
    maps = torch.from_numpy(make_coil_maps(m.n_coils, size)).to(_cdtype(cfg))
    mask = make_cartesian_mask((size, size), m.acceleration, m.acs_lines)
    model = MRIModel(maps, mask)
    with torch.no_grad():
        y = _add_noise(model.apply(x), sigma, rng)
        z = model.pinv(y)
    return Problem("mri", model, y, z, x, maps=maps, in_channels=2)


def network_spec(cfg: ExperimentConfig, in_channels: int) -> UNetSpec:
    n = cfg.network
    return UNetSpec(n.depth, n.base_channels, in_channels, None, n.residual)


def prepare_network(cfg: ExperimentConfig, in_channels: int) -> tuple[UNet, list[torch.nn.Parameter], str]:
    """Fresh or checkpointed network plus its trainable parameter list."""
    spec = network_spec(cfg, in_channels)
    mode = cfg.adaptation.mode
    if mode == "scratch":
        torch.manual_seed(cfg.seed)
        net = UNet(spec).to(_dtype(cfg))
    else:
        net = load_checkpoint(cfg.adaptation.checkpoint, expected=spec, dtype=_dtype(cfg))
    selector = select_parameters(net, "bn-only" if mode == "na-bn" else "full")
    params = selector.apply(net)
    net.train()
    return net, params, selector.mode


# ---------------------------------------------------------------------------
# The optimisation loop


def _optimizer(params, cfg: ExperimentConfig) -> torch.optim.Optimizer:
    o = cfg.optimizer
    return torch.optim.Adam(params, lr=o.learning_rate, betas=(o.beta1, o.beta2), eps=o.eps)


def _environment_note() -> str:
    return f"python {platform.python_version()}, torch {torch.__version__}, numpy {np.__version__}, {platform.machine()}"


def _optimize(cfg: ExperimentConfig, problem: Problem, net: UNet, params, step: Callable[[int], LossBreakdown],
              method: str, extra: dict | None = None) -> TrainRun:
    opt = _optimizer(params, cfg)
    run = TrainRun(trainable_params=count_parameters(net, trainable_only=True),
                   total_params=count_parameters(net), net=net)
    patience = cfg.optimizer.early_stop_patience
    best_mc, since_best = math.inf, 0
    elapsed = 0.0
    for it in range(1, cfg.optimizer.iterations + 1):
        t0 = time.perf_counter()
        opt.zero_grad(set_to_none=True)
        br = step(it)
        if not br.is_finite():
            run.aborted = True
            run.diagnostic = {"iter": it, "reason": "non-finite loss", **br.values()}
            log.warning("run aborted at iteration %d: non-finite loss %s", it, br.values())
            break
        br.total.backward()
        opt.step()
        elapsed += time.perf_counter() - t0
        vals = br.values()
        q = problem.quality(br.recon) if br.recon is not None else None
        run.records.append({"iter": it, "wall_time_s": elapsed, **vals, "psnr": q})
        if patience is not None:
            if vals["mc"] < best_mc * (1 - 1e-6):
                best_mc, since_best = vals["mc"], 0
            else:
                since_best += 1
                if since_best >= patience:
                    log.info("early stop at iteration %d", it)
                    break
    run.recon = _eval_preserving_stats(net, problem.z).detach()
    run.state = {k: v.detach().clone() for k, v in net.state_dict().items()}
    final_q = problem.quality(run.recon)
    run.manifest = {
        "method": method,
        "task": cfg.task,
        "config_hash": cfg.digest(),
        "seed": cfg.seed,
        "mode": cfg.adaptation.mode,
        "iterations": run.iterations,
        "aborted": run.aborted,
        "final_psnr": final_q,
        "trainable_params": run.trainable_params,
        "total_params": run.total_params,
        "environment": _environment_note(),
        "epoch_iterations": cfg.optimizer.epoch_iterations,
        **(extra or {}),
    }
    return run


def _group(cfg: ExperimentConfig) -> RotationGroup:
    return RotationGroup(cfg.group_order)


def _noise_generator(cfg: ExperimentConfig) -> torch.Generator:
    return torch.Generator().manual_seed(int(np.random.SeedSequence(cfg.seed).generate_state(1)[0]))


def _ei_step(cfg, net, z, group_rng, gen, draw_sketch):
    """Per-iteration closure: draw (A_S, y_S), then g, and evaluate the loss."""
    lam, group = cfg.loss.lam, _group(cfg)
    rei = cfg.loss.rei

    def step(it):
        sk = draw_sketch()
        g = sample_group(group, group_rng)
        if rei:
            return rei_sketched_loss(net, sk.y, sk, z, g, lam, cfg.loss.noise_sigma, gen)
        return sketched_ei_loss(net, sk.y, sk, z, g, lam)

    return step


def run_dip(cfg: ExperimentConfig, problem: Problem | None = None) -> TrainRun:
    """Fit the network to one measurement with the measurement-consistency loss only."""
    problem = problem or build_problem(cfg)
    net, params, _ = prepare_network(cfg, problem.in_channels)
    zero = torch.zeros((), dtype=_dtype(cfg))

    def step(it):
        x1 = net(problem.z)
        mc = sq_norm(problem.y - problem.model.apply(x1))
        return LossBreakdown(mc, zero, 0.0, x1.detach())

    return _optimize(cfg, problem, net, params, step, "dip")


def run_ei(cfg: ExperimentConfig, problem: Problem | None = None) -> TrainRun:
    """Full (unsketched) EI training."""
    problem = problem or build_problem(cfg)
    net, params, _ = prepare_network(cfg, problem.in_channels)
    streams = _streams(cfg.seed)
    group, gen = _group(cfg), _noise_generator(cfg)
    lam = cfg.loss.lam

    def step(it):
        g = sample_group(group, streams["group"])
        if cfg.loss.rei:
            return rei_sketched_loss(net, problem.y, problem.model, problem.z, g, lam, cfg.loss.noise_sigma, gen)
        return ei_loss(net, problem.y, problem.model, g, lam, z=problem.z)

    return _optimize(cfg, problem, net, params, step, "ei")


def run_sketched_ei(cfg: ExperimentConfig, problem: Problem | None = None) -> TrainRun:
    """Sketched EI: CT angle batches, or uniformly drawn physical coils for MRI.

    One sketch draw per iteration is shared by the MC and EI terms.
    """
    problem = problem or build_problem(cfg)
    net, params, _ = prepare_network(cfg, problem.in_channels)
    streams = _streams(cfg.seed)
    extra = {}
    if problem.task == "ct":
        part = make_angle_partition(problem.model.n_angles, cfg.ct.n_batches)
        subs = [restrict_model(problem.model, part, b, problem.y) for b in range(part.n_batches)]

        def draw():
            return subs[sample_batch(part, streams["sketch"])]

        extra["n_batches"] = part.n_batches
    else:
        m = cfg.mri
        if m.sketch_kind == "coil-sketch":
            return run_coil_sketched_ei(cfg, problem)
        n_keep = m.n_keep if m.sketch_kind == "classical-coil" else problem.model.n_coils

        def draw():
            return classical_coil_sketch(problem.model, n_keep, streams["sketch"], problem.y)

        extra["n_keep"] = n_keep
    step = _ei_step(cfg, net, problem.z, streams["group"], _noise_generator(cfg), draw)
    return _optimize(cfg, problem, net, params, step, "sketched-ei", extra)


def run_bn_adaptation(cfg: ExperimentConfig, problem: Problem | None = None) -> TrainRun:
    """Sketched EI from a pretrained checkpoint, updating only normalisation parameters."""
    if cfg.adaptation.mode != "na-bn":
        cfg = cfg.updated(**{"adaptation.mode": "na-bn"})
    return run_method(cfg, problem)


def run_coil_sketched_ei(cfg: ExperimentConfig, problem: Problem | None = None,
                         provider: SensitivityProvider | None = None) -> TrainRun:
    """PCA-compress the coils, sketch the low-energy virtual coils and run EI.

    The sketch is drawn once per run unless ``mri.resample_sketch`` is set.
    The network input stays the unsketched A^dagger y.
    """
    problem = problem or build_problem(cfg)
    if problem.task != "mri":
        raise ConfigError("coil sketching needs an MRI task", field="task")
    m = cfg.mri
    if m.n_virtual is None or m.n_retained is None or m.n_sketched is None:
        raise ConfigError("coil-sketch needs n_virtual, n_retained and n_sketched", field="n_virtual")
    model: MRIModel = problem.model
    if not m.n_retained + m.n_sketched <= m.n_virtual <= model.n_coils:
        raise ConfigError("require R + S <= L <= number of coils", field="n_virtual")
    net, params, _ = prepare_network(cfg, problem.in_channels)
    streams = _streams(cfg.seed)
    known = problem.maps if m.maps_source == "known" else None
    comp = coil_compress(problem.y, m.n_virtual, mask=model.mask, maps=known)
    if comp.maps is None:
        provider = provider or AcsMaps(m.acs_lines)
        comp.maps = provider(comp.kspace, model.mask).to(model.maps.dtype)
    elif provider is not None:
        comp.maps = provider(comp.kspace, model.mask)
    current = {"sk": sketch_mri_model(model, comp, build_coil_sketch_matrix(
        m.n_virtual, m.n_retained, m.n_sketched, streams["sketch"]))}

    def draw():
        if m.resample_sketch:
            current["sk"] = sketch_mri_model(model, comp, build_coil_sketch_matrix(
                m.n_virtual, m.n_retained, m.n_sketched, streams["sketch"]))
        return current["sk"]

    step = _ei_step(cfg, net, problem.z, streams["group"], _noise_generator(cfg), draw)
    extra = {"n_virtual": m.n_virtual, "n_retained": m.n_retained, "n_sketched": m.n_sketched,
             "eigenvalues": [float(v) for v in comp.eigenvalues]}
    return _optimize(cfg, problem, net, params, step, "coil-sketched-ei", extra)


def run_method(cfg: ExperimentConfig, problem: Problem | None = None) -> TrainRun:
    """Dispatch on ``loss.method`` (and the MRI sketch kind)."""
    method = cfg.loss.method
    if method == "dip":
        return run_dip(cfg, problem)
    if method == "ei":
        return run_ei(cfg, problem)
    if cfg.task == "mri" and cfg.mri.sketch_kind == "coil-sketch":
        return run_coil_sketched_ei(cfg, problem)
    return run_sketched_ei(cfg, problem)


# ---------------------------------------------------------------------------
# Supervised pretraining for the adaptation experiments


def pretrain_supervised(cfg: ExperimentConfig, n_images: int = 32, iterations: int = 300,
                        batch_size: int = 4, learning_rate: float = 1e-3,
                        checkpoint: str | Path | None = None) -> UNet:
    """Train ``F(A^dagger y) ~ x`` on random ellipse phantoms under the config's operator."""
    problem = build_problem(cfg)
    spec = network_spec(cfg, problem.in_channels)
    torch.manual_seed(cfg.seed)
    net = UNet(spec).to(_dtype(cfg))
    net.train()
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed).spawn(5)[4])
    size = cfg.image_size
    images = [random_ellipses(size, rng) for _ in range(n_images)]
    if problem.task == "mri":
        xs = torch.from_numpy(np.stack([np.stack([im, np.zeros_like(im)]) for im in images])).to(_dtype(cfg))
    else:
        xs = torch.from_numpy(np.stack(images)[:, None]).to(_dtype(cfg))
    with torch.no_grad():
        ys = problem.model.apply(xs)
        ys = _add_noise(ys, cfg.data.measurement_noise, rng)
        zs = problem.model.pinv(ys)
    opt = torch.optim.Adam(net.parameters(), lr=learning_rate)
    for _ in range(iterations):
        idx = torch.from_numpy(rng.choice(n_images, size=min(batch_size, n_images), replace=False))
        opt.zero_grad(set_to_none=True)
        loss = ((net(zs[idx]) - xs[idx]) ** 2).mean()
        loss.backward()
        opt.step()
    if checkpoint is not None:
        save_checkpoint(net, checkpoint)
    return net

"""Run directories: persistence, reports, plots, benchmark grids and theory studies."""

from __future__ import annotations

import csv
import datetime as _dt
import itertools
import json
import os
import tempfile
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .analysis import spectrum_profile, verify_theory
from .config import ExperimentConfig, load_config, parse_config, save_config
from .errors import ConfigError, ReportError
from .io import save_png, write_array
from .linops import CTModel, to_complex, uniform_angles
from .netmodel import save_checkpoint
from .trainer import RECORD_FIELDS, TrainRun, build_problem, run_method

MANIFEST = "manifest.json"
METRICS = "metrics.csv"
RECON_RAW = "recon.f32"
RECON_PNG = "recon.png"
CHECKPOINT = "checkpoint.npz"
CONFIG = "config.json"
FIGURES = ("psnr_vs_iteration.png", "mse_vs_walltime.png")
REPORT_COLUMNS = ("name", "method", "mode", "n_batches", "psnr", "s_per_iter", "s_per_epoch",
                  "trainable_params", "iterations", "epochs", "aborted")


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def _atomic_write_json(path: Path, payload: dict):
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".manifest-", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
            fh.write("\n")
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_metrics(path: Path, records: list[dict]):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(RECORD_FIELDS)
        for r in records:
            w.writerow([_fmt(r.get(k)) for k in RECORD_FIELDS])


def read_metrics(path: Path) -> dict[str, np.ndarray]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    out = {}
    for k in RECORD_FIELDS:
        out[k] = np.array([float(r[k]) if r.get(k) not in (None, "") else np.nan for r in rows])
    return out


def _check_scale(cfg: ExperimentConfig, allow_paper_scale: bool):
    if cfg.scale == "paper" and not allow_paper_scale:
        raise ConfigError("paper-scale configs run for hours on CPU; pass --paper-scale to confirm", field="scale")


def run_experiment(cfg: ExperimentConfig, output_dir: str | Path | None = None,
                   allow_paper_scale: bool = False) -> tuple[Path, dict]:
    """Train per the config and persist every artifact; returns (run dir, manifest).

    The manifest is written last and atomically, so its presence marks a
    complete run.
    """
    _check_scale(cfg, allow_paper_scale)
    run_dir = Path(output_dir or cfg.output_dir) / cfg.name
    run_dir.mkdir(parents=True, exist_ok=True)
    stale = run_dir / MANIFEST
    if stale.exists():
        stale.unlink()
    started = _now()
    save_config(cfg, run_dir / CONFIG)
    problem = build_problem(cfg)
    run = run_method(cfg, problem)
    finished = _now()
    artifacts = _write_artifacts(run_dir, run, problem.task)
    peak = None
    if problem.reference is not None:
        ref = to_complex(problem.reference).abs() if problem.task == "mri" else problem.reference
        peak = float(ref.max())
    manifest = {
        "name": cfg.name,
        "config": cfg.model_dump(mode="json"),
        "seed": cfg.seed,
        "started": started,
        "finished": finished,
        "artifacts": artifacts,
        "code_version": f"skei {__version__}",
        "peak": peak,
        "summary": run.manifest,
    }
    _atomic_write_json(run_dir / MANIFEST, manifest)
    return run_dir, manifest


def _write_artifacts(run_dir: Path, run: TrainRun, task: str) -> list[str]:
    write_metrics(run_dir / METRICS, run.records)
    img = run.recon[0]
    if task == "mri":
        arr = to_complex(run.recon)[0].numpy()
        preview = np.abs(arr)
    else:
        arr = img[0].numpy()
        preview = arr
    write_array(run_dir / RECON_RAW, arr)
    save_png(run_dir / RECON_PNG, preview)
    save_checkpoint(run.net, run_dir / CHECKPOINT)
    return [CONFIG, METRICS, RECON_RAW, RECON_PNG, CHECKPOINT]


def _run_dirs(path: Path) -> list[Path]:
    if not path.is_dir():
        raise ReportError(f"{path} is not a directory")
    if (path / MANIFEST).exists() or (path / METRICS).exists() or (path / CONFIG).exists():
        return [path]
    subs = sorted(p for p in path.iterdir() if p.is_dir())
    if not subs:
        raise ReportError(f"{path} contains no runs")
    return subs


def load_run(run_dir: Path) -> tuple[dict, dict[str, np.ndarray]]:
    manifest_path = run_dir / MANIFEST
    if not manifest_path.exists():
        raise ReportError(f"{run_dir} is incomplete: no {MANIFEST}")
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    missing = [a for a in manifest.get("artifacts", []) if not (run_dir / a).exists()]
    if missing:
        raise ReportError(f"{run_dir} is incomplete: missing {', '.join(missing)}")
    return manifest, read_metrics(run_dir / METRICS)


def report(path: str | Path, write: bool = True) -> list[dict]:
    """One row per completed run; also written to ``report.csv`` in ``path``."""
    path = Path(path)
    rows = []
    for d in _run_dirs(path):
        manifest, metrics = load_run(d)
        s = manifest["summary"]
        cfg = manifest["config"]
        iters = len(metrics["iter"])
        s_per_iter = float(metrics["wall_time_s"][-1] / iters) if iters else float("nan")
        epoch = s.get("epoch_iterations", 36)
        rows.append({
            "name": manifest["name"],
            "method": s["method"],
            "mode": s["mode"],
            "n_batches": s.get("n_batches", (cfg.get("ct") or {}).get("n_batches", "")),
            "psnr": s.get("final_psnr"),
            "s_per_iter": s_per_iter,
            "s_per_epoch": s_per_iter * epoch,
            "trainable_params": s["trainable_params"],
            "iterations": iters,
            "epochs": iters / epoch,
            "aborted": s["aborted"],
        })
    if write:
        with open(path / "report.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.DictWriter(fh, fieldnames=REPORT_COLUMNS)
            w.writeheader()
            for r in rows:
                w.writerow({k: _fmt(r[k]) for k in REPORT_COLUMNS})
    return rows


def plot(path: str | Path) -> list[Path]:
    """PSNR against iteration and MSE against wall time, two PNGs per run."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    written = []
    for d in _run_dirs(Path(path)):
        manifest, m = load_run(d)
        peak = manifest.get("peak")
        has_ref = peak is not None and not np.all(np.isnan(m["psnr"]))
        fig, ax = plt.subplots(figsize=(5, 3.5))
        if has_ref:
            ax.plot(m["iter"], m["psnr"])
            ax.set_ylabel("PSNR (dB)")
        else:
            ax.plot(m["iter"], m["total"])
            ax.set_yscale("log")
            ax.set_ylabel("training loss")
        ax.set_xlabel("iteration")
        ax.set_title(manifest["name"])
        fig.tight_layout()
        out = d / FIGURES[0]
        fig.savefig(out, dpi=100)
        plt.close(fig)
        written.append(out)

        fig, ax = plt.subplots(figsize=(5, 3.5))
        if has_ref:
            ax.plot(m["wall_time_s"], peak**2 * 10 ** (-m["psnr"] / 10))
            ax.set_ylabel("MSE")
        else:
            ax.plot(m["wall_time_s"], m["mc"])
            ax.set_ylabel("measurement-consistency loss")
        ax.set_yscale("log")
        ax.set_xlabel("wall time (s, this machine)")
        ax.set_title(manifest["name"])
        fig.tight_layout()
        out = d / FIGURES[1]
        fig.savefig(out, dpi=100)
        plt.close(fig)
        written.append(out)
    return written


# ---------------------------------------------------------------------------
# Benchmark grids


def expand_grid(grid: dict) -> list[ExperimentConfig]:
    """``{"base": {...}, "vary": {"ct.n_batches": [1, 2, 5]}}`` -> one config per combination."""
    if "base" not in grid:
        raise ConfigError("grid needs a 'base' config", field="base")
    unknown = set(grid) - {"base", "vary", "output_dir", "workers"}
    if unknown:
        raise ConfigError(f"unknown grid keys {sorted(unknown)}", field=sorted(unknown)[0])
    base = parse_config(grid["base"])
    vary = grid.get("vary", {})
    keys = list(vary)
    configs = []
    for values in itertools.product(*(vary[k] for k in keys)):
        overrides = dict(zip(keys, values))
        label = "-".join(f"{k.split('.')[-1]}={v}" for k, v in overrides.items()) or "base"
        configs.append(base.updated(**overrides, name=f"{base.name}-{label}"))
    return configs


def _bench_one(args):
    cfg_json, out_dir, allow = args
    torch.set_num_threads(1)
    cfg = parse_config(json.loads(cfg_json))
    run_dir, _ = run_experiment(cfg, out_dir, allow)
    return str(run_dir)


def bench(grid_path: str | Path, workers: int | None = None, allow_paper_scale: bool = False) -> list[dict]:
    grid_path = Path(grid_path)
    try:
        grid = json.loads(grid_path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read grid {grid_path}: {exc}", field="grid") from exc
    configs = expand_grid(grid)
    out_dir = Path(grid.get("output_dir") or configs[0].output_dir)
    workers = workers or int(grid.get("workers", 1))
    jobs = [(c.model_dump_json(), str(out_dir), allow_paper_scale) for c in configs]
    for c in configs:
        _check_scale(c, allow_paper_scale)
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            list(pool.map(_bench_one, jobs))
    else:
        for job in jobs:
            _bench_one(job)
    return report(out_dir)


# ---------------------------------------------------------------------------
# Theory verification


def run_theory(cfg: ExperimentConfig, output_dir: str | Path | None = None) -> dict:
    """Sketch-deviation scaling study plus a spectrum profile of a small CT operator."""
    t = cfg.theory
    result = verify_theory(t.rows, t.cols, t.m_list, t.trials, t.rank, cfg.seed)
    size = min(cfg.image_size, 64)
    n_angles = cfg.ct.n_angles if cfg.ct is not None else 30
    prof = spectrum_profile(CTModel(size, uniform_angles(n_angles)), t.n_singular, rng=cfg.seed)
    result["ct_spectrum"] = {"image_size": size, "n_angles": n_angles, **prof.to_dict()}
    out = Path(output_dir or cfg.output_dir) / cfg.name
    out.mkdir(parents=True, exist_ok=True)
    _atomic_write_json(out / "theory.json", result)
    return result


def load_and_run(path: str | Path, allow_paper_scale: bool = False,
                 output_dir: str | Path | None = None) -> tuple[Path, dict]:
    return run_experiment(load_config(path), output_dir, allow_paper_scale)

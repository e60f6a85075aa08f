"""Experiment configuration: JSON schema, validation, defaults and persistence."""

from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path
from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .errors import ConfigError

SEED_ENV = "SKEI_SEED"


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_assignment=True)


class CTConfig(_Strict):
    n_angles: int = Field(50, ge=1)
    n_batches: int = Field(5, ge=1)
    filter: Literal["ramlak", "hann"] = "ramlak"

    @model_validator(mode="after")
    def _batches_fit(self):
        if self.n_batches > self.n_angles:
            raise ValueError(f"n_batches ({self.n_batches}) exceeds n_angles ({self.n_angles})")
        return self


class MRIConfig(_Strict):
    n_coils: int = Field(8, ge=1)
    acceleration: int = Field(4, ge=1)
    acs_lines: int = Field(16, ge=0)
    sketch_kind: Literal["none", "classical-coil", "coil-sketch"] = "none"
    n_keep: int | None = Field(None, ge=1)
    n_virtual: int | None = Field(None, ge=1)
    n_retained: int | None = Field(None, ge=0)
    n_sketched: int | None = Field(None, ge=0)
    resample_sketch: bool = False
    maps_source: Literal["known", "acs"] = "known"

    @model_validator(mode="after")
    def _sketch_params(self):
        if self.sketch_kind == "classical-coil":
            if self.n_keep is None:
                raise ValueError("n_keep is required for classical-coil sketches")
            if self.n_keep > self.n_coils:
                raise ValueError(f"n_keep ({self.n_keep}) exceeds n_coils ({self.n_coils})")
        if self.sketch_kind == "coil-sketch":
            for name in ("n_virtual", "n_retained", "n_sketched"):
                if getattr(self, name) is None:
                    raise ValueError(f"{name} is required for coil-sketch")
            if self.n_virtual > self.n_coils:
                raise ValueError(f"n_virtual ({self.n_virtual}) exceeds n_coils ({self.n_coils})")
            if self.n_retained + self.n_sketched > self.n_virtual:
                raise ValueError("n_retained + n_sketched exceeds n_virtual")
            if self.n_retained + self.n_sketched < 1:
                raise ValueError("n_retained + n_sketched must be >= 1")
        return self


class LossConfig(_Strict):
    method: Literal["dip", "ei", "sketched-ei"] = "sketched-ei"
    lam: float = Field(1.0, ge=0)
    rei: bool = False
    noise_sigma: float = Field(0.0, ge=0)


class OptimizerConfig(_Strict):
    method: Literal["adam"] = "adam"
    learning_rate: float = Field(5e-4, gt=0)
    iterations: int = Field(1500, ge=1)
    beta1: float = Field(0.9, ge=0, lt=1)
    beta2: float = Field(0.999, ge=0, lt=1)
    eps: float = Field(1e-8, gt=0)
    epoch_iterations: int = Field(36, ge=1)
    early_stop_patience: int | None = Field(None, ge=1)


class NetworkConfig(_Strict):
    depth: int = Field(3, ge=1)
    base_channels: int = Field(8, ge=1)
    residual: bool = True


class AdaptationConfig(_Strict):
    mode: Literal["scratch", "na-full", "na-bn"] = "scratch"
    checkpoint: str | None = None

    @model_validator(mode="after")
    def _needs_checkpoint(self):
        if self.mode != "scratch" and not self.checkpoint:
            raise ValueError(f"mode {self.mode} requires a checkpoint path")
        return self


class DataConfig(_Strict):
    phantom: Literal["shepp-logan", "disks"] = "shepp-logan"
    image_path: str | None = None
    kspace_path: str | None = None
    maps_path: str | None = None
    measurement_noise: float = Field(0.0, ge=0)


class TheoryConfig(_Strict):
    rows: int = Field(256, ge=1)
    cols: int = Field(64, ge=1)
    m_list: list[int] = Field(default_factory=lambda: [8, 16, 32, 64, 128, 256])
    trials: int = Field(50, ge=20)
    rank: int = Field(4, ge=1)
    n_singular: int = Field(40, ge=1)


class ExperimentConfig(_Strict):
    name: str = "run"
    task: Literal["ct", "mri"]
    scale: Literal["desk", "paper"] = "desk"
    image_size: int = Field(128, ge=16)
    ct: CTConfig | None = None
    mri: MRIConfig | None = None
    loss: LossConfig = Field(default_factory=LossConfig)
    optimizer: OptimizerConfig = Field(default_factory=OptimizerConfig)
    network: NetworkConfig = Field(default_factory=NetworkConfig)
    adaptation: AdaptationConfig = Field(default_factory=AdaptationConfig)
    data: DataConfig = Field(default_factory=DataConfig)
    theory: TheoryConfig = Field(default_factory=TheoryConfig)
    group_order: int = Field(360, ge=1)
    seed: int = 0
    dtype: Literal["float32", "float64"] = "float32"
    output_dir: str = "runs"

    @model_validator(mode="after")
    def _one_task_block(self):
        active, other = ("ct", "mri") if self.task == "ct" else ("mri", "ct")
        if getattr(self, other) is not None:
            raise ValueError(f"block '{other}' is not allowed for task '{self.task}'")
        if getattr(self, active) is None:
            object.__setattr__(self, active, CTConfig() if active == "ct" else MRIConfig())
        return self

    def to_json(self) -> str:
        return json.dumps(self.model_dump(mode="json"), indent=2, sort_keys=True)

    def digest(self) -> str:
        canon = json.dumps(self.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()[:16]

    def updated(self, **dotted) -> "ExperimentConfig":
        """Copy with dotted-path overrides, e.g. ``updated(**{"ct.n_batches": 10})``."""
        data = self.model_dump(mode="json")
        for key, value in dotted.items():
            node = data
            *parents, leaf = key.split(".")
            for part in parents:
                if node.get(part) is None:
                    node[part] = {}
                node = node[part]
            node[leaf] = value
        return parse_config(data)


def _field_of(err: ValidationError) -> str:
    first = err.errors()[0]
    loc = ".".join(str(p) for p in first["loc"])
    msg = first["msg"]
    for name in ("n_batches", "n_keep", "n_virtual", "n_retained", "n_sketched", "checkpoint"):
        if name in msg and name not in loc:
            loc = f"{loc}.{name}" if loc else name
            break
    return loc or "config"


def parse_config(data: dict) -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as exc:
        field = _field_of(exc)
        raise ConfigError(f"invalid config field '{field}': {exc.errors()[0]['msg']}", field=field) from exc


def load_config(path: str | Path, apply_env: bool = True) -> ExperimentConfig:
    """Read a UTF-8 JSON config; ``SKEI_SEED`` (if set) overrides ``seed``."""
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}", field="path") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}", field="config") from exc
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object", field="config")
    cfg = parse_config(data)
    if apply_env and os.environ.get(SEED_ENV):
        try:
            cfg = cfg.updated(seed=int(os.environ[SEED_ENV]))
        except ValueError as exc:
            raise ConfigError(f"{SEED_ENV} must be an integer", field="seed") from exc
    return cfg


def save_config(cfg: ExperimentConfig, path: str | Path) -> Path:
    path = Path(path)
    path.write_text(cfg.to_json() + "\n", encoding="utf-8")
    return path

"""Run configuration: model architecture, synthetic data, training and evaluation.

A run config is a sectioned INI file (``[model]``, ``[data]``, ``[train]``,
``[eval]``).  Every key has a default equal to the desk preset and unknown
keys are rejected.
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

REGIONAL_VARIABLES = ("U", "V", "T", "Q", "P", "TCC", "SSRD")
N_FRAMES = 6
SAMPLING_MODES = ("adaptive", "random", "fixed_grid")
COUPLING_MODES = ("bidirectional", "unidirectional", "none")
ATTN_SCALES = ("per_head", "full_dim")


class ConfigError(ValueError):
    """A configuration invariant does not hold."""


@dataclass(frozen=True)
class ModelConfig:
    # global grid and channel layout: upper-air blocks, then surface, then static
    global_h: int = 32
    global_w: int = 64
    n_upper_vars: int = 1
    n_levels: int = 2
    n_surface: int = 4
    n_static: int = 2
    patch: int = 4
    # regional grid, offsets in fine cells from the global domain's north-west corner
    region_h: int = 40
    region_w: int = 60
    region_row0: int = 60
    region_col0: int = 140
    n_regional_vars: int = 7
    regional_patch: int = 20
    d: int = 32
    heads: int = 4
    M: int = 8
    k: int = 4
    mlp_ratio: int = 4
    m: int = 8
    global_head_hidden: int = 16
    regional_head_hidden: int = 8
    fourier_dim: int = 0  # 0 -> d
    attn_scale: str = "per_head"
    dropout: float = 0.0
    drop_path: float = 0.0
    sampling: str = "adaptive"
    coupling: str = "bidirectional"
    surface_weights: tuple[float, ...] = ()  # empty -> all ones
    upper_weights: tuple[float, ...] = ()  # per (variable, level), empty -> all ones

    @property
    def L(self) -> int:
        return self.M // self.k

    @property
    def channels(self) -> int:
        return self.n_upper_vars * self.n_levels + self.n_surface + self.n_static

    @property
    def pred_channels(self) -> int:
        return self.channels - self.n_static

    @property
    def token_grid(self) -> tuple[int, int]:
        return self.global_h // self.patch, self.global_w // self.patch

    @property
    def n_tokens(self) -> int:
        r, c = self.token_grid
        return r * c

    @property
    def regional_token_grid(self) -> tuple[int, int]:
        return self.region_h // self.regional_patch, self.region_w // self.regional_patch

    @property
    def n_regional_tokens(self) -> int:
        r, c = self.regional_token_grid
        return r * c

    @property
    def fine_factor(self) -> int:
        return self.regional_patch // self.patch

    @property
    def fourier(self) -> int:
        return self.fourier_dim or self.d

    def w_surface(self) -> tuple[float, ...]:
        return self.surface_weights or (1.0,) * self.n_surface

    def w_upper(self) -> tuple[float, ...]:
        return self.upper_weights or (1.0,) * (self.n_upper_vars * self.n_levels)

    def validate(self) -> "ModelConfig":
        def need(cond, name, msg):
            if not cond:
                raise ConfigError(f"model.{name}: {msg}")

        need(self.k >= 1 and self.M % self.k == 0, "M", f"M={self.M} must equal k*L (k={self.k})")
        need(self.regional_patch == 5 * self.patch, "regional_patch",
             f"must be 5*patch={5 * self.patch}")
        need(self.global_h % self.patch == 0 and self.global_w % self.patch == 0, "patch",
             "patch must divide the global grid")
        need(self.region_h % self.regional_patch == 0 and self.region_w % self.regional_patch == 0,
             "regional_patch", "regional patch must divide the region")
        need(self.region_row0 % self.regional_patch == 0
             and self.region_col0 % self.regional_patch == 0, "region_row0",
             "region offset must be a multiple of the regional patch")
        need(self.region_row0 + self.region_h <= 5 * self.global_h
             and self.region_col0 + self.region_w <= 5 * self.global_w, "region_h",
             "region must lie inside the global domain")
        need(self.d % self.heads == 0, "heads", "d must be divisible by heads")
        need(self.fourier % 2 == 0, "fourier_dim", "Fourier embedding size must be even")
        need(1 <= self.m <= self.n_tokens, "m", f"m must be in [1, {self.n_tokens}]")
        need(self.n_regional_vars == len(REGIONAL_VARIABLES), "n_regional_vars",
             f"must be {len(REGIONAL_VARIABLES)}")
        need(self.sampling in SAMPLING_MODES, "sampling", f"one of {SAMPLING_MODES}")
        need(self.coupling in COUPLING_MODES, "coupling", f"one of {COUPLING_MODES}")
        need(self.attn_scale in ATTN_SCALES, "attn_scale", f"one of {ATTN_SCALES}")
        need(0.0 <= self.dropout < 1.0 and 0.0 <= self.drop_path < 1.0, "dropout",
             "rates must be in [0, 1)")
        need(len(self.w_surface()) == self.n_surface, "surface_weights",
             f"needs {self.n_surface} values")
        need(len(self.w_upper()) == self.n_upper_vars * self.n_levels, "upper_weights",
             f"needs {self.n_upper_vars * self.n_levels} values")
        return self


DESK = ModelConfig()

# Appendix-table architecture at full size; only ever counted, never built.
FULL_SCALE = ModelConfig(
    global_h=720, global_w=1440,
    n_upper_vars=5, n_levels=13, n_surface=6, n_static=3,
    patch=6,
    region_h=1290, region_w=1980, region_row0=750, region_col0=2100,
    regional_patch=30,
    d=1536, heads=8, M=24, k=4, mlp_ratio=4, m=64,
    global_head_hidden=256, regional_head_hidden=32,
    dropout=0.1, drop_path=0.1,
)


@dataclass(frozen=True)
class DataConfig:
    seed: int = 0
    n_timesteps: int = 1440  # hourly frames
    lat_north: float = 60.0
    lat_south: float = -20.0
    lon_west: float = 40.0
    lon_east: float = 200.0
    ridge_amplitude: float = 1.0
    ridge_wavelength: float = 24.0  # fine cells
    base_wind: float = 2.5  # fine cells per hour
    rotation_period_h: float = 240.0
    wave_amplitude: float = 1.2
    noise_scale: float = 0.0
    tracer_scale: float = 12.0  # smoothing length of tracer patterns, fine cells
    n_stations: int = 12
    start_day_of_year: int = 100

    def validate(self) -> "DataConfig":
        if self.n_timesteps < 12:
            raise ConfigError(f"data.n_timesteps: must be >= 12, got {self.n_timesteps}")
        if not self.lat_north > self.lat_south or not self.lon_east > self.lon_west:
            raise ConfigError("data.lat_north: domain bounds are inverted")
        if abs(self.lat_north) >= 90 or abs(self.lat_south) >= 90:
            raise ConfigError("data.lat_north: domain must exclude the poles")
        return self


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 1
    steps: int = 2000
    lr: float = 3e-4
    min_lr: float = 1e-6
    warmup: int = 100
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    clip: float = 1.0
    eval_every: int = 250
    max_val_samples: int = 24
    pretrain_steps: int = 1500
    pretrain_lr: float = 1e-3
    pretrain_threshold: float = 0.8  # final val loss / persistence val loss must fall below
    rollout_steps: int = 60
    rollout_lr: float = 2e-5
    rollout_horizon: int = 8

    def validate(self) -> "TrainConfig":
        for name in ("batch_size", "rollout_horizon"):
            if getattr(self, name) < 1:
                raise ConfigError(f"train.{name}: must be >= 1")
        for name in ("steps", "pretrain_steps", "rollout_steps", "warmup"):
            if getattr(self, name) < 0:
                raise ConfigError(f"train.{name}: must be >= 0")
        if self.lr < 0 or self.rollout_lr < 0 or self.pretrain_lr < 0:
            raise ConfigError("train.lr: learning rates must be >= 0")
        return self


@dataclass(frozen=True)
class EvalConfig:
    init_index: int = 0
    forecast_steps: int = 8
    ablation_ks: tuple[int, ...] = (2, 4, 8)

    def validate(self) -> "EvalConfig":
        if self.forecast_steps < 1:
            raise ConfigError("eval.forecast_steps: must be >= 1")
        return self


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def validate(self) -> "RunConfig":
        self.model.validate()
        self.data.validate()
        self.train.validate()
        self.eval.validate()
        return self

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def replace(self, section: str, **changes) -> "RunConfig":
        new = dataclasses.replace(getattr(self, section), **changes)
        return dataclasses.replace(self, **{section: new})


_SECTIONS = {"model": ModelConfig, "data": DataConfig, "train": TrainConfig, "eval": EvalConfig}


def _parse_value(raw: str, default: Any, where: str) -> Any:
    try:
        if isinstance(default, bool):
            low = raw.strip().lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            parts = [p for p in raw.replace(",", " ").split() if p]
            return tuple(float(p) if "." in p or "e" in p.lower() else int(p) for p in parts)
        return raw.strip()
    except ValueError as exc:
        raise ConfigError(f"{where}: cannot parse {raw!r}") from exc


def parse_config(text: str) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str  # keep key case (M, L, ...)
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"config syntax: {exc}") from exc
    parts = {}
    for section in parser.sections():
        if section not in _SECTIONS:
            raise ConfigError(f"unknown section [{section}]")
        cls = _SECTIONS[section]
        defaults = {f.name: getattr(cls(), f.name) for f in fields(cls)}
        values = {}
        for key, raw in parser.items(section):
            if key not in defaults:
                raise ConfigError(f"{section}.{key}: unknown key")
            values[key] = _parse_value(raw, defaults[key], f"{section}.{key}")
        parts[section] = cls(**values)
    return RunConfig(**parts).validate()


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig().validate()
    return parse_config(Path(path).read_text())


def dump_config(cfg: RunConfig) -> str:
    lines = []
    for section, obj in (("model", cfg.model), ("data", cfg.data),
                         ("train", cfg.train), ("eval", cfg.eval)):
        lines.append(f"[{section}]")
        for f in fields(obj):
            value = getattr(obj, f.name)
            if isinstance(value, tuple):
                value = ", ".join(str(v) for v in value)
            lines.append(f"{f.name} = {value}")
        lines.append("")
    return "\n".join(lines)

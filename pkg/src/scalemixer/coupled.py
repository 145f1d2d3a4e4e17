"""The coupled global-regional forecaster: assembly, one-step forward, rollout and losses."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .config import ModelConfig
from .global_model import encode_range, global_layout, global_patch_embed, global_prediction_head
from .nn import INFERENCE, Context, ParamSpec, ParamView, allocate, count
from .regional import (
    LEAD_HOURS,
    mixer_layout,
    regional_layout,
    regional_layer,
    regional_patch_embed,
    regional_prediction_head,
    scalemixer_forward,
)
from .state import ForecastBundle, KeyPositionSet, RegionalState, RegionGeometry, TokenSequence
from .tensor import (
    ContractError,
    DimensionError,
    Tensor,
    abs_,
    concat,
    mean,
    mul,
    slice_last,
    sum_,
    take_rows,
)


def model_layout(cfg: ModelConfig) -> list[ParamSpec]:
    layout = global_layout(cfg) + regional_layout(cfg)
    if cfg.coupling != "none":
        for b in range(cfg.k):
            layout += mixer_layout(cfg, b)
    return layout


def parameter_counts(cfg: ModelConfig) -> dict[str, int]:
    """Counts by component, computed from the layout without allocating anything."""
    glob = count(global_layout(cfg))
    reg = count(regional_layout(cfg))
    mix = sum(count(mixer_layout(cfg, b)) for b in range(cfg.k)) if cfg.coupling != "none" else 0
    return {"global": glob, "regional": reg, "mixer": mix, "total": glob + reg + mix}


def build_model(cfg: ModelConfig, seed: int) -> dict[str, np.ndarray]:
    """Allocate a parameter store; identical seeds give bit-identical stores."""
    cfg.validate()
    RegionGeometry.from_config(cfg)
    return allocate(model_layout(cfg), np.random.default_rng(seed))


def is_regional_param(name: str) -> bool:
    """Trainable predicate that freezes the global model."""
    return not name.startswith("global.")


def is_global_param(name: str) -> bool:
    return name.startswith("global.")


def as_view(params: dict[str, np.ndarray] | ParamView) -> ParamView:
    return params if isinstance(params, ParamView) else ParamView(params)


@dataclass
class StepTrace:
    """Diagnostics from one forward step (key positions per coupling block)."""

    key_positions: list[KeyPositionSet] = field(default_factory=list)


def forward_step(U: Tensor, r: RegionalState, params, cfg: ModelConfig,
                 ctx: Context = INFERENCE, rng: np.random.Generator | None = None,
                 trace: StepTrace | None = None) -> ForecastBundle:
    """One coupled step: 6 h global forecast plus hourly regional forecasts for +1..+6 h."""
    pv = as_view(params)
    geom = RegionGeometry.from_config(cfg)
    S = global_patch_embed(U, pv, cfg)
    s = regional_patch_embed(r, pv, cfg)
    L = cfg.L
    for b in range(cfg.k):
        S = encode_range(S, b * L, (b + 1) * L, pv, cfg, ctx)
        s = regional_layer(s, b, pv, cfg, ctx)
        if cfg.coupling != "none":
            S, s, kps = scalemixer_forward(S, s, geom, cfg.sampling, cfg.coupling,
                                           pv.scope(f"mixer{b}"), cfg, ctx, rng)
            if trace is not None:
                trace.key_positions.append(kps)
    global_pred = global_prediction_head(S, U, pv, cfg)
    if cfg.coupling == "none":
        # standalone regional model: no global information reaches the heads
        S_aligned = Tensor(np.zeros(s.tokens.shape))
    else:
        S_aligned = take_rows(S.tokens, geom.aligned_index)
    fourier = pv.fourier("regional.fourier")
    regional = [regional_prediction_head(s, S_aligned, dt, pv, fourier, r.last, cfg)
                for dt in LEAD_HOURS]
    return ForecastBundle(global_pred, regional)


def advance_clock(hour_of_day: float, day_of_year: float, hours: float) -> tuple[float, float]:
    total = hour_of_day + hours
    days, hod = divmod(total, 24.0)
    doy = (day_of_year - 1 + days) % 365 + 1
    return hod, doy


def next_inputs(U: Tensor, r: RegionalState, bundle: ForecastBundle,
                cfg: ModelConfig) -> tuple[Tensor, RegionalState]:
    """Feed a step's predictions back as the next step's inputs; statics carried through."""
    static = slice_last(U, cfg.pred_channels, cfg.channels)
    U_next = concat([bundle.global_pred, static], axis=2)
    hod, doy = advance_clock(r.hour_of_day, r.day_of_year, 6.0)
    r_next = RegionalState(list(bundle.regional), r.topography, r.land_sea_mask, hod, doy)
    return U_next, r_next


def rollout(U: Tensor, r: RegionalState, n_steps: int, params, cfg: ModelConfig,
            ctx: Context = INFERENCE, rng: np.random.Generator | None = None) -> list[ForecastBundle]:
    if n_steps < 1:
        raise ContractError("rollout needs n_steps >= 1")
    pv = as_view(params)
    out = []
    for n in range(n_steps):
        bundle = forward_step(U, r, pv, cfg, ctx, rng)
        out.append(bundle)
        if n + 1 < n_steps:
            U, r = next_inputs(U, r, bundle, cfg)
    return out


# ---------------------------------------------------------------------- losses


def channel_loss_weights(cfg: ModelConfig) -> np.ndarray:
    """Per predicted channel factor so that a weighted sum of per-channel MAEs gives the global loss.

    Upper-air channels (variable-major, level-minor) carry w / n_levels, surface
    channels carry their own weight; the whole vector is divided by V_S + V_A.
    """
    upper = np.asarray(cfg.w_upper(), dtype=np.float64) / cfg.n_levels
    surface = np.asarray(cfg.w_surface(), dtype=np.float64)
    return np.concatenate([upper, surface]) / (cfg.n_surface + cfg.n_upper_vars)


def global_weighted_mae(pred: Tensor, truth, cfg: ModelConfig) -> Tensor:
    truth = truth if isinstance(truth, Tensor) else Tensor(np.asarray(truth, dtype=np.float64))
    if pred.shape != truth.shape or pred.shape[-1] != cfg.pred_channels:
        raise DimensionError(f"global loss: {pred.shape} vs {truth.shape}")
    per_channel = mean(abs_(pred - truth), axis=(0, 1))
    return sum_(mul(per_channel, channel_loss_weights(cfg)))


def regional_mae(pred: Tensor, truth) -> Tensor:
    truth = truth if isinstance(truth, Tensor) else Tensor(np.asarray(truth, dtype=np.float64))
    if pred.shape != truth.shape:
        raise DimensionError(f"regional loss: {pred.shape} vs {truth.shape}")
    return mean(mean(abs_(pred - truth), axis=(0, 1)))


def regional_step_loss(bundle: ForecastBundle, targets) -> Tensor:
    """Sum of the six hourly regional MAEs, accumulated in lead order."""
    total = regional_mae(bundle.regional[0], targets[0])
    for pred, truth in zip(bundle.regional[1:], targets[1:]):
        total = total + regional_mae(pred, truth)
    return total

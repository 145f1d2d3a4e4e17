"""Three-stage training: global pretraining, one-step regional training, rollout fine-tuning."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import grid1
from .config import REGIONAL_VARIABLES, ModelConfig, RunConfig, TrainConfig
from .coupled import (
    build_model,
    forward_step,
    global_weighted_mae,
    is_global_param,
    is_regional_param,
    next_inputs,
    regional_mae,
    regional_step_loss,
)
from .data import Dataset, Split
from .global_model import global_forward
from .nn import INFERENCE, Context, ParamView
from .tensor import Tensor, backward

LOG_COLUMNS = ("step", "lr", "train_loss") + tuple(f"val_mae_{v}" for v in REGIONAL_VARIABLES)
STAGES = ("pretrain-global", "one-step", "rollout-ft")


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss or gradient."""


class PrerequisiteError(RuntimeError):
    """A training stage was started without the checkpoint it builds on."""


# ------------------------------------------------------------------ optimizer


def cosine_lr(step: int, total: int, base: float, floor: float, warmup: int) -> float:
    """Linear warmup to ``base`` then cosine decay to ``floor`` at ``total``."""
    if base == 0.0:
        return 0.0
    if warmup > 0 and step < warmup:
        return base * (step + 1) / warmup
    span = max(total - warmup, 1)
    progress = min(max(step - warmup, 0) / span, 1.0)
    return floor + 0.5 * (base - floor) * (1.0 + math.cos(math.pi * progress))


def clip_by_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> tuple[dict[str, np.ndarray], float]:
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if not math.isfinite(total):
        raise DivergenceError("non-finite gradient norm")
    if max_norm > 0 and total > max_norm:
        scale = max_norm / total
        grads = {k: g * scale for k, g in grads.items()}
    return grads, total


class AdamW:
    """Adam moments with decoupled weight decay (skipped for biases, norms and 1-d vectors)."""

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
                 weight_decay: float = 0.01):
        self.beta1, self.beta2, self.eps, self.weight_decay = beta1, beta2, eps, weight_decay
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, store: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float) -> None:
        self.t += 1
        if lr == 0.0:
            return
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for name in sorted(grads):
            g = grads[name]
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(g)
                self.v[name] = np.zeros_like(g)
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p = store[name]
            decay = self.weight_decay if p.ndim >= 2 else 0.0
            store[name] = p * (1.0 - lr * decay) - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# ------------------------------------------------------------------ contexts


def train_context(cfg: ModelConfig, rng: np.random.Generator) -> Context:
    return Context(train=True, rng=rng, dropout=cfg.dropout, drop_path=cfg.drop_path,
                   attn_scale=cfg.attn_scale)


def eval_context(cfg: ModelConfig) -> Context:
    return Context(attn_scale=cfg.attn_scale)


def sampling_rng(cfg: ModelConfig, seed: int, hour: int) -> np.random.Generator | None:
    """Evaluation rng for the random-sampling variant, fixed per (seed, analysis hour)."""
    return np.random.default_rng([seed, hour, 7]) if cfg.sampling == "random" else None


def validation_hours(split: Split, n: int, steps: int = 1) -> list[int]:
    hours = split.init_hours(steps)
    if n >= len(hours):
        return hours
    pick = np.unique(np.round(np.linspace(0, len(hours) - 1, n)).astype(int))
    return [hours[i] for i in pick]


# ----------------------------------------------------------------- evaluation


def regional_mae_per_variable(pred: np.ndarray, truth: np.ndarray) -> np.ndarray:
    """Mean |pred - truth| over the grid for each variable (shared by training logs and eval)."""
    return np.abs(np.asarray(pred, dtype=np.float64) - np.asarray(truth, dtype=np.float64)).mean(axis=(0, 1))


def one_step_val_mae(store, cfg: ModelConfig, split: Split, hours: list[int], seed: int) -> np.ndarray:
    """Per-variable regional MAE in normalised units, averaged over leads 1..6 and ``hours``."""
    total = np.zeros(cfg.n_regional_vars)
    ctx = eval_context(cfg)
    for hour in hours:
        U, r = split.inputs(hour)
        bundle = forward_step(U, r, store, cfg, ctx, sampling_rng(cfg, seed, hour))
        targets = split.regional_targets(hour)
        per_lead = [regional_mae_per_variable(p.data, t) for p, t in zip(bundle.regional, targets)]
        total += np.mean(per_lead, axis=0)
    return total / len(hours)


def rollout_lead_mae(store, cfg: ModelConfig, split: Split, hours: list[int], n_steps: int,
                     seed: int) -> np.ndarray:
    """Per-lead (1 .. 6 n_steps) per-variable regional MAE in normalised units."""
    out = np.zeros((6 * n_steps, cfg.n_regional_vars))
    ctx = eval_context(cfg)
    for hour in hours:
        U, r = split.inputs(hour)
        rng = sampling_rng(cfg, seed, hour)
        for n in range(n_steps):
            bundle = forward_step(U, r, store, cfg, ctx, rng)
            for i, (p, t) in enumerate(zip(bundle.regional, split.regional_targets(hour, n))):
                out[6 * n + i] += regional_mae_per_variable(p.data, t)
            U, r = next_inputs(U, r, bundle, cfg)
    return out / len(hours)


def global_val_loss(store, cfg: ModelConfig, split: Split, hours: list[int]) -> tuple[float, float]:
    """(model, persistence) global weighted MAE averaged over ``hours``."""
    ctx = eval_context(cfg)
    model = persist = 0.0
    for hour in hours:
        U = Tensor(split.global_state(hour))
        truth = split.global_target(hour)
        pred = global_forward(U, ParamView(store), cfg, ctx)
        model += global_weighted_mae(pred, truth, cfg).item()
        persist += global_weighted_mae(Tensor(U.data[..., :cfg.pred_channels]), truth, cfg).item()
    return model / len(hours), persist / len(hours)


# ----------------------------------------------------------------- logging


class TrainLog:
    """Append-only CSV with the fixed training-log columns."""

    def __init__(self, path: str | Path | None):
        self.path = Path(path) if path is not None else None
        self.rows: list[dict[str, float]] = []
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "w", newline="") as fh:
                csv.writer(fh).writerow(LOG_COLUMNS)

    def append(self, step: int, lr: float, loss: float, val: np.ndarray | None) -> None:
        vals = [float("nan")] * len(REGIONAL_VARIABLES) if val is None else [float(v) for v in val]
        row = dict(zip(LOG_COLUMNS, [step, lr, loss, *vals]))
        self.rows.append(row)
        if self.path is not None:
            with open(self.path, "a", newline="") as fh:
                csv.writer(fh).writerow([step, repr(lr), repr(loss), *(repr(v) for v in vals)])


def read_log(path: str | Path) -> list[dict[str, float]]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        return [{k: float(v) for k, v in row.items()} for row in reader]


# ------------------------------------------------------------------ checkpoints


def save_checkpoint(path: str | Path, store: dict[str, np.ndarray], entries: dict[str, object]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    grid1.write(path, {k: np.asarray(v, dtype=np.float64) for k, v in sorted(store.items())})
    grid1.write_manifest(path.with_suffix(".manifest"), entries)


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    path = Path(path)
    if not path.exists():
        raise PrerequisiteError(f"missing checkpoint {path}")
    store = {k: np.array(v, dtype=np.float64) for k, v in grid1.read(path).items()}
    meta = grid1.read_manifest(path.with_suffix(".manifest")) if path.with_suffix(".manifest").exists() else {}
    return store, meta


def with_global(store: dict[str, np.ndarray], global_store: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    """Copy the global model's parameters into a coupled store."""
    out = dict(store)
    for name, value in global_store.items():
        if is_global_param(name):
            if name not in out or out[name].shape != value.shape:
                raise PrerequisiteError(f"global checkpoint parameter {name} does not fit the model")
            out[name] = np.array(value, dtype=np.float64)
    return out


# ------------------------------------------------------------------ training loops


@dataclass
class TrainResult:
    store: dict[str, np.ndarray]
    log: list[dict[str, float]] = field(default_factory=list)
    final_loss: float = float("nan")
    extra: dict[str, float] = field(default_factory=dict)


def _checked(loss: Tensor, step: int) -> float:
    value = loss.item()
    if not math.isfinite(value):
        raise DivergenceError(f"non-finite loss at step {step}")
    return value


def _run_steps(store: dict[str, np.ndarray], trainable: Callable[[str], bool], n_steps: int,
               tcfg: TrainConfig, base_lr: float, warmup: int, rng: np.random.Generator,
               loss_fn: Callable[[ParamView, np.random.Generator], Tensor],
               on_step: Callable[[int, float, float], None] | None = None, fixed_lr: bool = False) -> float:
    """Shared optimisation loop; batches are accumulated in a fixed order."""
    opt = AdamW(tcfg.beta1, tcfg.beta2, weight_decay=tcfg.weight_decay)
    loss_value = float("nan")
    for step in range(n_steps):
        if fixed_lr:
            lr = base_lr
        else:
            lr = cosine_lr(step, n_steps, base_lr, min(tcfg.min_lr, base_lr), warmup)
        acc: dict[str, np.ndarray] = {}
        loss_value = 0.0
        for _ in range(tcfg.batch_size):
            pv = ParamView(store, trainable)
            try:
                loss = loss_fn(pv, rng)
            except FloatingPointError as exc:
                raise DivergenceError(f"non-finite activation at step {step}: {exc}") from exc
            loss_value += _checked(loss, step) / tcfg.batch_size
            for name, g in pv.gradients(backward(loss)).items():
                acc[name] = acc[name] + g if name in acc else g.copy()
        grads = {k: g / tcfg.batch_size for k, g in acc.items()}
        grads, _ = clip_by_global_norm(grads, tcfg.clip)
        opt.step(store, grads, lr)
        if on_step is not None:
            try:
                on_step(step, lr, loss_value)
            except FloatingPointError as exc:
                raise DivergenceError(f"non-finite validation output after step {step}: {exc}") from exc
    return loss_value


def pretrain_global(cfg: RunConfig, dataset: Dataset, seed: int, log_path=None,
                    store: dict[str, np.ndarray] | None = None) -> TrainResult:
    """Train the global model alone on 6-hour global steps with the weighted MAE."""
    mcfg, tcfg = cfg.model, cfg.train
    store = dict(build_model(mcfg, seed) if store is None else store)
    train, val = dataset["train"], dataset["val"]
    hours = train.init_hours(1)
    val_hours = validation_hours(val, tcfg.max_val_samples)
    ctx_rng = np.random.default_rng([seed, 11])
    log = TrainLog(log_path)

    def loss_fn(pv, rng):
        hour = hours[rng.integers(len(hours))]
        pred = global_forward(Tensor(train.global_state(hour)), pv, mcfg, train_context(mcfg, ctx_rng))
        return global_weighted_mae(pred, train.global_target(hour), mcfg)

    def on_step(step, lr, loss):
        log.append(step, lr, loss, None)

    final = _run_steps(store, is_global_param, tcfg.pretrain_steps, tcfg, tcfg.pretrain_lr,
                       min(tcfg.warmup, tcfg.pretrain_steps), np.random.default_rng([seed, 10]),
                       loss_fn, on_step)
    model, persist = global_val_loss(store, mcfg, val, val_hours)
    ratio = model / persist if persist > 0 else float("nan")
    return TrainResult(store, log.rows, final, {"val_loss": model, "persistence_loss": persist,
                                                "ratio": ratio,
                                                "threshold_met": float(ratio < tcfg.pretrain_threshold)})


def train_one_step(cfg: RunConfig, dataset: Dataset, seed: int, store: dict[str, np.ndarray],
                   log_path=None, steps: int | None = None) -> TrainResult:
    """Regional + ScaleMixer training on 1..6 h regional targets; the global model stays frozen."""
    mcfg, tcfg = cfg.model, cfg.train
    store = dict(store)
    n_steps = tcfg.steps if steps is None else steps
    train, val = dataset["train"], dataset["val"]
    hours = train.init_hours(1)
    val_hours = validation_hours(val, tcfg.max_val_samples)
    ctx_rng = np.random.default_rng([seed, 21])
    log = TrainLog(log_path)

    def loss_fn(pv, rng):
        hour = hours[rng.integers(len(hours))]
        U, r = train.inputs(hour)
        bundle = forward_step(U, r, pv, mcfg, train_context(mcfg, ctx_rng), rng)
        return regional_step_loss(bundle, train.regional_targets(hour))

    def on_step(step, lr, loss):
        scores = None
        if step == n_steps - 1 or (tcfg.eval_every and (step + 1) % tcfg.eval_every == 0):
            scores = one_step_val_mae(store, mcfg, val, val_hours, seed)
        log.append(step + 1, lr, loss, scores)

    try:
        init_val = one_step_val_mae(store, mcfg, val, val_hours, seed)
    except FloatingPointError as exc:
        raise DivergenceError(f"starting parameters give non-finite forecasts: {exc}") from exc
    log.append(0, 0.0, float("nan"), init_val)
    final = _run_steps(store, is_regional_param, n_steps, tcfg, tcfg.lr, tcfg.warmup,
                       np.random.default_rng([seed, 20]), loss_fn, on_step)
    final_val = one_step_val_mae(store, mcfg, val, val_hours, seed)
    return TrainResult(store, log.rows, final, {"init_val_mae": float(init_val.mean()),
                                                "val_mae": float(final_val.mean())})


def rollout_loss(pv: ParamView, mcfg: ModelConfig, split: Split, hour: int, horizon: int,
                 ctx: Context = INFERENCE, rng: np.random.Generator | None = None) -> Tensor:
    """Global weighted MAE plus the six hourly regional MAEs, summed over ``horizon`` chained steps."""
    U, r = split.inputs(hour)
    total = None
    for n in range(horizon):
        bundle = forward_step(U, r, pv, mcfg, ctx, rng)
        term = global_weighted_mae(bundle.global_pred, split.global_target(hour, n), mcfg)
        for pred, truth in zip(bundle.regional, split.regional_targets(hour, n)):
            term = term + regional_mae(pred, truth)
        total = term if total is None else total + term
        if n + 1 < horizon:
            U, r = next_inputs(U, r, bundle, mcfg)
    return total


def train_rollout_finetune(cfg: RunConfig, dataset: Dataset, seed: int, store: dict[str, np.ndarray],
                           log_path=None, horizon: int | None = None) -> TrainResult:
    """Backpropagate through ``horizon`` chained steps; loss sums global and regional MAE."""
    mcfg, tcfg = cfg.model, cfg.train
    store = dict(store)
    horizon = tcfg.rollout_horizon if horizon is None else horizon
    train, val = dataset["train"], dataset["val"]
    hours = train.init_hours(horizon)
    val_hours = validation_hours(val, tcfg.max_val_samples)
    ctx_rng = np.random.default_rng([seed, 31])
    log = TrainLog(log_path)

    def loss_fn(pv, rng):
        hour = hours[rng.integers(len(hours))]
        return rollout_loss(pv, mcfg, train, hour, horizon, train_context(mcfg, ctx_rng), rng)

    def on_step(step, lr, loss):
        last = step == tcfg.rollout_steps - 1
        scores = one_step_val_mae(store, mcfg, val, val_hours, seed) if last else None
        log.append(step + 1, lr, loss, scores)

    final = _run_steps(store, is_regional_param, tcfg.rollout_steps, tcfg, tcfg.rollout_lr, 0,
                       np.random.default_rng([seed, 30]), loss_fn, on_step, fixed_lr=True)
    return TrainResult(store, log.rows, final)

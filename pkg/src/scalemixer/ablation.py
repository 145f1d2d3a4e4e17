"""Sampling/coupling variants and the encoder-depth sweep, trained under one shared budget."""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import RunConfig
from .coupled import build_model, forward_step
from .data import Dataset
from .metrics import lat_weighted_rmse
from .train import (
    eval_context,
    one_step_val_mae,
    sampling_rng,
    train_one_step,
    validation_hours,
    with_global,
)

VARIANTS = {
    "ScaleMixer": {},
    "A": {"sampling": "random"},
    "B": {"sampling": "fixed_grid"},
    "C": {"coupling": "unidirectional"},
    "D": {"coupling": "none"},
}

COLUMNS = ("variant", "T_rmse", "U_rmse", "val_mae", "delta_T", "delta_U", "delta_val_mae",
           "infer_ms_per_step")


@dataclass
class AblationRow:
    variant: str
    T_rmse: float
    U_rmse: float
    val_mae: float
    infer_ms_per_step: float
    delta_T: float = 0.0
    delta_U: float = 0.0
    delta_val_mae: float = 0.0


def relative_delta(variant: float, full: float) -> float:
    return (variant - full) / full


def holdout_rmse(store, cfg: RunConfig, dataset: Dataset, seed: int) -> tuple[np.ndarray, float]:
    """Per-variable lat-weighted RMSE in physical units over leads 1..6, plus ms per forward step."""
    mcfg = cfg.model
    split = dataset["test"]
    hours = validation_hours(split, cfg.train.max_val_samples)
    stats = dataset.regional_stats
    ctx = eval_context(mcfg)
    total = np.zeros(mcfg.n_regional_vars)
    elapsed = 0.0
    for hour in hours:
        U, r = split.inputs(hour)
        t0 = time.perf_counter()
        bundle = forward_step(U, r, store, mcfg, ctx, sampling_rng(mcfg, seed, hour))
        elapsed += time.perf_counter() - t0
        for pred, truth in zip(bundle.regional, split.regional_targets(hour)):
            total += lat_weighted_rmse(stats.inverse(pred.data), stats.inverse(truth), dataset.regional_lats)
    return total / (len(hours) * 6), 1000.0 * elapsed / len(hours)


def run_variant(cfg: RunConfig, dataset: Dataset, seed: int, global_store, log_path=None):
    """Train one configuration from the shared global checkpoint; returns (row metrics, train result)."""
    store = with_global(build_model(cfg.model, seed), global_store)
    result = train_one_step(cfg, dataset, seed, store, log_path)
    rmse, ms = holdout_rmse(result.store, cfg, dataset, seed)
    val = float(one_step_val_mae(result.store, cfg.model, dataset["val"],
                                 validation_hours(dataset["val"], cfg.train.max_val_samples), seed).mean())
    T_idx, U_idx = 2, 0
    return AblationRow("", float(rmse[T_idx]), float(rmse[U_idx]), val, ms), result


def variant_configs(cfg: RunConfig) -> list[tuple[str, RunConfig]]:
    out = [(name, cfg.replace("model", **kw)) for name, kw in VARIANTS.items()]
    for k in cfg.eval.ablation_ks:
        out.append((f"k={k}", cfg.replace("model", k=k)))
    return out


def run_ablation(cfg: RunConfig, dataset: Dataset, seed: int, global_store,
                 log_dir: str | Path | None = None) -> list[AblationRow]:
    """Rows for every variant and every k; a k equal to the base config reuses the full run."""
    rows: list[AblationRow] = []
    cache: dict[str, AblationRow] = {}
    for name, vcfg in variant_configs(cfg):
        key = vcfg.hash()
        if key not in cache:
            log = None if log_dir is None else Path(log_dir) / f"train_{name.replace('=', '')}.csv"
            cache[key], _ = run_variant(vcfg, dataset, seed, global_store, log)
        base = cache[key]
        rows.append(AblationRow(name, base.T_rmse, base.U_rmse, base.val_mae, base.infer_ms_per_step))
    full = rows[0]
    for row in rows:
        row.delta_T = relative_delta(row.T_rmse, full.T_rmse)
        row.delta_U = relative_delta(row.U_rmse, full.U_rmse)
        row.delta_val_mae = relative_delta(row.val_mae, full.val_mae)
    return rows


def write_table(rows: list[AblationRow], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(COLUMNS)
        for r in rows:
            writer.writerow([r.variant, repr(r.T_rmse), repr(r.U_rmse), repr(r.val_mae), repr(r.delta_T),
                             repr(r.delta_U), repr(r.delta_val_mae), f"{r.infer_ms_per_step:.3f}"])


def format_table(rows: list[AblationRow]) -> str:
    head = f"{'variant':<11}{'T RMSE':>10}{'U RMSE':>10}{'val MAE':>10}{'dT':>9}{'dU':>9}{'dMAE':>9}{'ms/step':>9}"
    lines = [head, "-" * len(head)]
    for r in rows:
        lines.append(f"{r.variant:<11}{r.T_rmse:>10.4f}{r.U_rmse:>10.4f}{r.val_mae:>10.4f}"
                     f"{r.delta_T:>+9.1%}{r.delta_U:>+9.1%}{r.delta_val_mae:>+9.1%}{r.infer_ms_per_step:>9.1f}")
    return "\n".join(lines)


def read_table(path: str | Path) -> list[dict[str, object]]:
    """Parse ``ablation.csv`` back into rows with float metric columns."""
    with open(path, newline="") as fh:
        return [{k: v if k == "variant" else float(v) for k, v in row.items()} for row in csv.DictReader(fh)]

"""Command-line front end: data generation, staged training, forecasting, evaluation, checks."""

from __future__ import annotations

import argparse
import csv
import hashlib
import sys
import time
from pathlib import Path

import numpy as np

from . import ablation, grid1, gradcheck
from .config import REGIONAL_VARIABLES, ConfigError, RunConfig, dump_config, load_config
from .coupled import build_model, rollout
from .data import (
    file_sha256,
    generate_synthetic,
    geometry_manifest,
    global_variable_names,
    iso_timestamp,
    read_dataset,
    write_dataset,
)
from .metrics import StationSet, acc, lat_weighted_rmse, station_interpolate
from .train import (
    DivergenceError,
    PrerequisiteError,
    eval_context,
    load_checkpoint,
    pretrain_global,
    sampling_rng,
    save_checkpoint,
    train_one_step,
    train_rollout_finetune,
    with_global,
)

EXIT_OK, EXIT_CONFIG, EXIT_PREREQ, EXIT_FAIL = 0, 2, 3, 4

CHECKPOINTS = {"pretrain-global": "global.grd", "one-step": "one_step.grd", "rollout-ft": "rollout_ft.grd"}
PARENT = {"one-step": "pretrain-global", "rollout-ft": "one-step"}


def lead_name(hour: int) -> str:
    return f"u_lead_{hour:03d}"


def global_lead_name(hour: int) -> str:
    return f"global_lead_{hour:03d}"


def _config(args) -> RunConfig:
    try:
        cfg = load_config(args.config)
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from exc
    return cfg.replace("data", seed=args.seed).validate()


def _manifest(cfg: RunConfig, args, **entries) -> dict[str, object]:
    return {"config_hash": cfg.hash(), "seed": args.seed, "command": args.command, **entries}


def _dataset(cfg: RunConfig, data_dir):
    try:
        return read_dataset(data_dir, cfg.model)
    except FileNotFoundError as exc:
        raise PrerequisiteError(str(exc)) from exc


def _check_store(store: dict[str, np.ndarray], cfg: RunConfig) -> None:
    expected = build_model(cfg.model, 0)
    for name, value in expected.items():
        if name not in store or store[name].shape != value.shape:
            raise ConfigError(f"model: checkpoint does not match the configured geometry at {name}")


# ------------------------------------------------------------------ commands


def cmd_gen_data(args) -> int:
    cfg = _config(args)
    out = Path(args.out)
    data = generate_synthetic(cfg.model, cfg.data)
    hashes = write_dataset(data, cfg, out)
    (out / "config.ini").write_text(dump_config(cfg))
    print(f"wrote {len(hashes)} files to {out} (config {cfg.hash()})")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    run = Path(args.out)
    stage = args.stage
    dataset = _dataset(cfg, args.data)
    data_hash = file_sha256(Path(args.data) / "dataset.manifest")
    log_path = run / f"log_{stage.replace('-', '_')}.csv"
    parent_hash = ""
    if stage == "pretrain-global":
        result = pretrain_global(cfg, dataset, args.seed, log_path)
    else:
        parent_path = run / CHECKPOINTS[PARENT[stage]]
        if not parent_path.exists():
            raise PrerequisiteError(f"stage {stage} needs {parent_path} (run --stage {PARENT[stage]} first)")
        parent, _ = load_checkpoint(parent_path)
        parent_hash = file_sha256(parent_path)
        if stage == "one-step":
            store = with_global(build_model(cfg.model, args.seed), parent)
            result = train_one_step(cfg, dataset, args.seed, store, log_path)
        else:
            _check_store(parent, cfg)
            result = train_rollout_finetune(cfg, dataset, args.seed, parent, log_path)
    ckpt = run / CHECKPOINTS[stage]
    entries = _manifest(cfg, args, stage=stage, data_manifest_sha256=data_hash,
                        parent_sha256=parent_hash, final_loss=repr(result.final_loss),
                        **{k: repr(v) for k, v in result.extra.items()})
    save_checkpoint(ckpt, result.store, entries)
    grid1.write_manifest(ckpt.with_suffix(".manifest"),
                         {**entries, "sha256.checkpoint": file_sha256(ckpt), "sha256.log": file_sha256(log_path)})
    print(f"{stage}: final loss {result.final_loss:.6f} -> {ckpt}")
    for k, v in result.extra.items():
        print(f"  {k} = {v:.6f}")
    if result.extra.get("threshold_met") == 0.0:
        print("  warning: global model did not beat the persistence threshold")
    return EXIT_OK


def _write_field_csv(path: Path, field: np.ndarray, lats, lons, names) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["lat", "lon", *names])
        for i, lat in enumerate(lats):
            for j, lon in enumerate(lons):
                writer.writerow([repr(float(lat)), repr(float(lon)), *(repr(float(v)) for v in field[i, j])])


def cmd_forecast(args) -> int:
    cfg = _config(args)
    mcfg = cfg.model
    dataset = _dataset(cfg, args.data)
    store, meta = load_checkpoint(args.checkpoint)
    _check_store(store, cfg)
    split = dataset[args.split]
    hours = split.init_hours(args.steps)
    index = cfg.eval.init_index if args.init_index is None else args.init_index
    if not hours or not 0 <= index < len(hours):
        raise ConfigError(f"eval.init_index: {index} outside the {len(hours)} usable analysis times")
    hour = hours[index]
    U, r = split.inputs(hour)
    bundles = rollout(U, r, args.steps, store, mcfg, eval_context(mcfg), sampling_rng(mcfg, args.seed, hour))
    rstats, gstats = dataset.regional_stats, dataset.global_stats
    gmean, gscale = gstats.mean[:mcfg.pred_channels], gstats.scale[:mcfg.pred_channels]
    records: dict[str, np.ndarray] = {}
    for n, bundle in enumerate(bundles):
        for i, frame in enumerate(bundle.regional):
            records[lead_name(6 * n + i + 1)] = rstats.inverse(frame.data)
        records[global_lead_name(6 * (n + 1))] = bundle.global_pred.data * gscale + gmean
    out = Path(args.out)
    (out / "csv").mkdir(parents=True, exist_ok=True)
    grid1.write(out / "forecast.grd", records)
    gnames = global_variable_names(mcfg)[:mcfg.pred_channels]
    csv_hash = hashlib.sha256()
    for name, field in records.items():
        regional = name.startswith("u_lead")
        lats = dataset.regional_lats if regional else dataset.global_lats
        lons = dataset.regional_lons if regional else dataset.global_lons
        path = out / "csv" / f"{name}.csv"
        _write_field_csv(path, field, lats, lons, REGIONAL_VARIABLES if regional else gnames)
        csv_hash.update(path.read_bytes())
    hod, doy = split.clock(hour)
    geometry = geometry_manifest(dataset.regional_lats, dataset.regional_lons, REGIONAL_VARIABLES,
                                 iso_timestamp(int(doy), int(hod)))
    entries = _manifest(cfg, args, split=args.split, init_hour=hour, steps=args.steps,
                        checkpoint_sha256=file_sha256(args.checkpoint),
                        checkpoint_config_hash=meta.get("config_hash", ""),
                        **geometry, **{"sha256.forecast.grd": file_sha256(out / "forecast.grd"),
                                       "sha256.csv": csv_hash.hexdigest()})
    grid1.write_manifest(out / "forecast.manifest", entries)
    print(f"forecast from hour {hour} ({args.split}), {args.steps} steps -> {out}")
    return EXIT_OK


def evaluate_forecast(forecast_dir, dataset, stations: StationSet | None = None):
    """Per (lead, variable) metrics rows, summary rows and optional station rows."""
    fdir = Path(forecast_dir)
    meta = grid1.read_manifest(fdir / "forecast.manifest")
    records = grid1.read(fdir / "forecast.grd")
    split = dataset[meta["split"]]
    hour = int(meta["init_hour"])
    n_leads = 6 * int(meta["steps"])
    lats, lons = dataset.regional_lats, dataset.regional_lons
    stats = dataset.regional_stats
    rows, station_err = [], {}
    per_var: dict[str, list[tuple[float, float, float, float]]] = {v: [] for v in REGIONAL_VARIABLES}
    for lead in range(1, max(n_leads, 48) + 1):
        name = lead_name(lead)
        try:
            truth_norm = split.regional_frame(hour + lead)
        except IndexError:
            truth_norm = None
        if name not in records or truth_norm is None:
            for var in REGIONAL_VARIABLES:
                rows.append({"lead": lead, "variable": var, "rmse": "", "acc": "", "mae": "",
                             "mae_norm": "", "status": "missing"})
            continue
        pred = np.asarray(records[name], dtype=np.float64)
        truth = stats.inverse(truth_norm)
        clim = dataset.climatology[(hour + lead) % 24]
        rmse = lat_weighted_rmse(pred, truth, lats)
        scores = acc(pred, truth, clim, lats)
        mae = np.abs(pred - truth).mean(axis=(0, 1))
        mae_norm = np.abs(stats.forward(pred) - truth_norm).mean(axis=(0, 1))
        for v, var in enumerate(REGIONAL_VARIABLES):
            rows.append({"lead": lead, "variable": var, "rmse": rmse[v], "acc": scores[v], "mae": mae[v],
                         "mae_norm": mae_norm[v], "status": "ok"})
            per_var[var].append((rmse[v], scores[v], mae[v], mae_norm[v]))
        if stations is not None:
            p_vals = station_interpolate(pred, lats, lons, stations)
            t_vals = station_interpolate(truth, lats, lons, stations)
            for pv, tv in zip(p_vals, t_vals):
                if pv.error is None:
                    station_err.setdefault(pv.id, []).append(pv.values - tv.values)
                else:
                    station_err.setdefault(pv.id, pv.error)
    summary = []
    for var in REGIONAL_VARIABLES:
        vals = np.array(per_var[var]) if per_var[var] else np.full((1, 4), np.nan)
        summary.append({"lead": "mean", "variable": var, "rmse": np.mean(vals[:, 0]),
                        "acc": np.nanmean(vals[:, 1]) if np.isfinite(vals[:, 1]).any() else float("nan"),
                        "mae": np.mean(vals[:, 2]), "mae_norm": np.mean(vals[:, 3]),
                        "status": f"{len(per_var[var])} leads"})
    summary.append({"lead": "mean", "variable": "ALL", "rmse": np.mean([s["rmse"] for s in summary]),
                     "acc": np.nanmean([s["acc"] for s in summary]),
                     "mae": np.mean([s["mae"] for s in summary]),
                     "mae_norm": np.mean([s["mae_norm"] for s in summary]), "status": "headline"})
    station_rows = []
    for sid, errs in station_err.items():
        if isinstance(errs, str):
            station_rows.append({"id": sid, **{v: "" for v in REGIONAL_VARIABLES}, "status": errs})
            continue
        e = np.array(errs)
        station_rows.append({"id": sid, **dict(zip(REGIONAL_VARIABLES, np.sqrt((e ** 2).mean(axis=0)))),
                             "status": "ok"})
    return rows, summary, station_rows


def _fmt(v) -> str:
    return "" if v == "" else repr(float(v))


def cmd_eval(args) -> int:
    cfg = _config(args)
    dataset = _dataset(cfg, args.data)
    fdir = Path(args.forecast)
    if not (fdir / "forecast.manifest").exists():
        raise PrerequisiteError(f"{fdir}: no forecast.manifest (run forecast first)")
    stations = StationSet.read_csv(args.stations) if args.stations else None
    rows, summary, station_rows = evaluate_forecast(fdir, dataset, stations)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cols = ["lead", "variable", "rmse", "acc", "mae", "mae_norm", "status"]
    with open(out / "metrics.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(cols)
        for row in rows + summary:
            writer.writerow([row["lead"], row["variable"], *(_fmt(row[c]) for c in cols[2:6]), row["status"]])
    lines = [f"{'variable':<8}{'RMSE':>12}{'ACC':>9}{'MAE':>12}   (mean over available leads)"]
    for s in summary:
        lines.append(f"{s['variable']:<8}{s['rmse']:>12.5f}{s['acc']:>9.4f}{s['mae']:>12.5f}")
    missing = sorted({r["lead"] for r in rows if r["status"] == "missing"})
    if missing:
        lines.append(f"missing leads: {missing[0]}..{missing[-1]} ({len(missing)} lead times)")
    entries = {"sha256.metrics.csv": file_sha256(out / "metrics.csv")}
    if station_rows:
        with open(out / "stations_rmse.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["id", *REGIONAL_VARIABLES, "status"])
            for row in station_rows:
                writer.writerow([row["id"], *(_fmt(row[v]) for v in REGIONAL_VARIABLES), row["status"]])
        lines.append("")
        lines.append("station RMSE")
        for row in station_rows:
            vals = " ".join("      n/a" if row[v] == "" else f"{row[v]:>9.4f}" for v in REGIONAL_VARIABLES)
            lines.append(f"{row['id']:<8}{vals}  {row['status'] if row['status'] != 'ok' else ''}".rstrip())
        entries["sha256.stations_rmse.csv"] = file_sha256(out / "stations_rmse.csv")
    report = "\n".join(lines) + "\n"
    (out / "report.txt").write_text(report)
    entries["sha256.forecast.manifest"] = file_sha256(fdir / "forecast.manifest")
    entries["sha256.forecast.grd"] = file_sha256(fdir / "forecast.grd")
    grid1.write_manifest(out / "eval.manifest", _manifest(cfg, args, **entries))
    print(report, end="")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    cfg = _config(args)
    t0 = time.perf_counter()
    seeds = range(args.seed, args.seed + args.seeds)
    worst_all = 0.0
    failed = []

    def report(name: str, err: float) -> None:
        nonlocal worst_all
        worst_all = max(worst_all, err)
        ok = err <= args.tol
        if not ok:
            failed.append(name)
        print(f"{'PASS' if ok else 'FAIL'}  {name:<34} {err:.3e}", flush=True)

    for site in gradcheck.ALL_SITES:
        report(site.name, gradcheck.run_site(site, seeds))
    report("global_model", gradcheck.check_global_model(cfg.model, args.seed, per_param=1))
    for group, err in gradcheck.check_model(cfg.model, args.seed, per_param=1).items():
        report(f"model.{group}", err)
    print(f"worst relative error {worst_all:.3e} (tol {args.tol:g}), {time.perf_counter() - t0:.1f}s")
    return EXIT_OK if not failed else EXIT_FAIL


def cmd_ablate(args) -> int:
    cfg = _config(args)
    dataset = _dataset(cfg, args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.global_checkpoint:
        global_store, _ = load_checkpoint(args.global_checkpoint)
    else:
        global_store = pretrain_global(cfg, dataset, args.seed, out / "log_pretrain_global.csv").store
    rows = ablation.run_ablation(cfg, dataset, args.seed, global_store, out)
    ablation.write_table(rows, out / "ablation.csv")
    text = ablation.format_table(rows) + "\n"
    (out / "ablation.txt").write_text(text)
    grid1.write_manifest(out / "ablation.manifest",
                         _manifest(cfg, args, **{"sha256.ablation.csv": file_sha256(out / "ablation.csv")}))
    print(text, end="")
    return EXIT_OK


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="scalemixer", description=__doc__)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=None, help="INI file with [model] [data] [train] [eval]")
    common.add_argument("--seed", type=int, default=0, help="single source of randomness")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[common], help="generate the synthetic dataset")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", parents=[common], help="run one training stage")
    p.add_argument("--stage", required=True, choices=tuple(CHECKPOINTS))
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="run directory holding checkpoints and logs")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("forecast", parents=[common], help="roll out a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--init-index", type=int, default=None)
    p.add_argument("--steps", type=int, default=None, help="6-hour steps (default eval.forecast_steps)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_forecast)

    p = sub.add_parser("eval", parents=[common], help="score a forecast against the dataset")
    p.add_argument("--forecast", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--stations", default=None, help="station CSV (id,lat,lon)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient checks")
    p.add_argument("--tol", type=float, default=gradcheck.DEFAULT_TOL)
    p.add_argument("--seeds", type=int, default=100, help="random seeds per op/layer site")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("ablate", parents=[common], help="variant and depth comparison")
    p.add_argument("--data", required=True)
    p.add_argument("--global-checkpoint", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "forecast" and args.steps is None:
            args.steps = _config(args).eval.forecast_steps
        if args.command == "forecast" and args.steps < 1:
            raise ConfigError("--steps must be >= 1")
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except PrerequisiteError as exc:
        print(f"missing prerequisite: {exc}", file=sys.stderr)
        return EXIT_PREREQ
    except DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_FAIL
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

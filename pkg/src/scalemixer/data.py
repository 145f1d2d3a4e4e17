"""Synthetic coupled coarse/fine weather fields, normalisation, splits and dataset files.

The fine grid is 5x finer than the global grid and covers the same domain.
Two tracers (temperature and moisture) are carried by hourly semi-Lagrangian
advection under a slowly rotating base wind plus travelling large-scale
waves; wind speed is amplified over ridges and damped in valleys.  Pressure,
cloud cover and radiation are diagnosed from the tracers, the wind and the
terrain.  The global state holds exact 5x5 block averages of the shared
surface channels, upper-air channels built from the large-scale flow plus an
independent mode the fine grid never sees, and static orography / land fraction.
"""

from __future__ import annotations

import datetime as _dt
import hashlib
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage
from scipy.special import expit

from . import grid1
from .config import N_FRAMES, REGIONAL_VARIABLES, ConfigError, DataConfig, ModelConfig, RunConfig
from .metrics import Station, StationSet, hourly_climatology
from .state import RegionalState
from .tensor import Tensor

FINE = 5
SIGMA_FLOOR = 1e-6
SPLITS = ("train", "val", "test")
REFERENCE_YEAR = 2021  # any non-leap year; only used for ISO timestamps

_T_RELAX_H = 48.0
_N_WAVES = 3


# ----------------------------------------------------------------- generation


@dataclass
class SyntheticData:
    """Physical-unit fields for every hour ``0 .. n_timesteps - 1``.

    ``global_frames[j]`` is the global state at hour ``6 j``.
    """

    global_frames: np.ndarray  # Tg x H x W x C
    regional_frames: np.ndarray  # T x h x w x 7
    topography: np.ndarray  # h x w x 1 (km)
    land_sea_mask: np.ndarray  # h x w x 1
    global_lats: np.ndarray
    global_lons: np.ndarray
    regional_lats: np.ndarray
    regional_lons: np.ndarray
    start_day_of_year: int
    fine_surface: np.ndarray | None = None  # Tg x 5H x 5W x n_surface, only on request

    @property
    def n_hours(self) -> int:
        return self.regional_frames.shape[0]


def _smooth_noise(rng: np.random.Generator, shape, sigma: float) -> np.ndarray:
    field = ndimage.gaussian_filter(rng.normal(size=shape), sigma, mode="wrap")
    return (field - field.mean()) / max(field.std(), 1e-12)


def _terrain(rng, shape, dcfg: DataConfig) -> tuple[np.ndarray, np.ndarray]:
    hf, wf = shape
    land = _smooth_noise(rng, shape, 18.0) > -0.2
    y, x = np.mgrid[0:hf, 0:wf].astype(np.float64)
    angle = rng.uniform(0.0, math.pi)
    phase = 2.0 * math.pi * (x * math.cos(angle) + y * math.sin(angle)) / dcfg.ridge_wavelength
    envelope = np.clip(1.0 + 0.6 * _smooth_noise(rng, shape, 25.0), 0.0, None)
    coast = ndimage.gaussian_filter(land.astype(np.float64), 3.0, mode="wrap")
    z = dcfg.ridge_amplitude * coast * envelope * (0.5 + 0.5 * np.sin(phase)) ** 2
    return z, land.astype(np.float64)


def _grid_centres(north, south, west, east, rows, cols):
    dlat = (north - south) / rows
    dlon = (east - west) / cols
    lats = north - (np.arange(rows) + 0.5) * dlat
    lons = west + (np.arange(cols) + 0.5) * dlon
    return lats, lons


def block_mean(fine: np.ndarray, factor: int = FINE) -> np.ndarray:
    """Average non-overlapping factor x factor blocks of a (..., rows, cols, C) array."""
    *lead, rows, cols, c = fine.shape
    blocks = fine.reshape(*lead, rows // factor, factor, cols // factor, factor, c)
    return blocks.mean(axis=(-4, -2))


def _check_scenario(mcfg: ModelConfig, dcfg: DataConfig) -> None:
    mcfg.validate()
    dcfg.validate()
    if mcfg.n_static != 2:
        raise ConfigError("model.n_static: the synthetic generator provides exactly 2 static fields")
    if mcfg.n_surface > len(REGIONAL_VARIABLES):
        raise ConfigError(f"model.n_surface: at most {len(REGIONAL_VARIABLES)} shared surface fields")


def generate_synthetic(mcfg: ModelConfig, dcfg: DataConfig, keep_fine: bool = False) -> SyntheticData:
    """Deterministic in ``dcfg.seed``; with zero wind and zero noise every frame is identical."""
    _check_scenario(mcfg, dcfg)
    rng = np.random.default_rng(dcfg.seed)
    H, W = mcfg.global_h, mcfg.global_w
    hf, wf = FINE * H, FINE * W
    shape = (hf, wf)
    flats, _ = _grid_centres(dcfg.lat_north, dcfg.lat_south, dcfg.lon_west, dcfg.lon_east, hf, wf)
    glats, glons = _grid_centres(dcfg.lat_north, dcfg.lat_south, dcfg.lon_west, dcfg.lon_east, H, W)
    _, flons = _grid_centres(dcfg.lat_north, dcfg.lat_south, dcfg.lon_west, dcfg.lon_east, hf, wf)

    z, land = _terrain(rng, shape, dcfg)
    zmax = max(float(z.max()), 1e-12)
    speed_factor = 0.6 + 0.8 * z / zmax
    dzdy, dzdx = np.gradient(z)

    y, x = np.mgrid[0:hf, 0:wf].astype(np.float64)
    lat_grad = (flats[:, None] - flats.mean()) / (flats.max() - flats.min())
    # tracer structure sits at scales a regional patch can represent; fine detail comes from terrain
    t_eq = 15.0 - 18.0 * lat_grad + 5.0 * _smooth_noise(rng, shape, dcfg.tracer_scale)
    q_eq = 8.0 - 4.0 * lat_grad + 2.5 * _smooth_noise(rng, shape, 0.8 * dcfg.tracer_scale)
    q_eq += 1.5 * (1.0 - land)
    temp, moist = t_eq.copy(), q_eq.copy()

    # travelling waves: psi = sum_j A_j sin(kx x + ky y - w t + phi)
    kx = 2.0 * math.pi * rng.integers(1, 3, size=_N_WAVES) / wf
    ky = 2.0 * math.pi * rng.integers(1, 3, size=_N_WAVES) / hf
    omega = 2.0 * math.pi / rng.uniform(72.0, 200.0, size=_N_WAVES)
    phi = rng.uniform(0.0, 2.0 * math.pi, size=_N_WAVES)
    kmag = np.sqrt(kx ** 2 + ky ** 2)
    amp = dcfg.wave_amplitude / (kmag * _N_WAVES)  # peak wave wind ~ wave_amplitude
    hidden_k = 2.0 * math.pi * np.array([1.0 / wf, 1.0 / hf])
    hidden_phi = rng.uniform(0.0, 2.0 * math.pi)
    theta0 = rng.uniform(0.0, 2.0 * math.pi)
    n_upper = mcfg.n_upper_vars * mcfg.n_levels
    upper_mix = rng.uniform(0.5, 1.5, size=(n_upper, 2)) * np.where(rng.random((n_upper, 2)) < 0.5, -1.0, 1.0)
    upper_base = np.linspace(5600.0, 1400.0, n_upper) if n_upper > 1 else np.array([5600.0])
    insolation = 450.0 * np.clip(np.cos(np.deg2rad(flats - 10.0)), 0.0, None)[:, None]
    noise_rng = np.random.default_rng([dcfg.seed, 1])

    def base(t: float) -> tuple[float, float]:
        ang = theta0 + 2.0 * math.pi * t / dcfg.rotation_period_h
        return dcfg.base_wind * math.cos(ang), dcfg.base_wind * math.sin(ang)

    def flow(t: float):
        bu, bv = base(t)
        u = np.full(shape, bu)
        v = np.full(shape, bv)
        psi = np.zeros(shape)
        for j in range(_N_WAVES):
            arg = kx[j] * x + ky[j] * y - omega[j] * t + phi[j]
            psi += amp[j] * np.sin(arg)
            c = amp[j] * np.cos(arg)
            u -= c * ky[j]
            v += c * kx[j]
        return u * speed_factor, v * speed_factor, psi

    r0, c0 = mcfg.region_row0, mcfg.region_col0
    rs = np.s_[r0:r0 + mcfg.region_h, c0:c0 + mcfg.region_w]
    T = dcfg.n_timesteps
    regional = np.empty((T, mcfg.region_h, mcfg.region_w, len(REGIONAL_VARIABLES)))
    n_global = (T - 1) // 6 + 1
    globals_ = np.empty((n_global, H, W, mcfg.channels))
    fine_keep = np.empty((n_global, hf, wf, mcfg.n_surface)) if keep_fine else None
    static = block_mean(np.stack([z, land], axis=-1))
    psi_scale = max(float(np.sum(np.abs(amp))), 1e-12)
    drift = np.zeros(2)  # the hidden mode is carried by the base wind at 1.5x speed

    for t in range(T):
        u, v, psi = flow(float(t))
        if t > 0:
            # semi-Lagrangian: value at the departure point of a one-hour back-trajectory
            coords = np.stack([y - v, x - u])
            temp = ndimage.map_coordinates(temp, coords, order=1, mode="grid-wrap")
            moist = ndimage.map_coordinates(moist, coords, order=1, mode="grid-wrap")
            temp = temp + (t_eq - temp) / _T_RELAX_H
            moist = moist + (q_eq - moist) / _T_RELAX_H
            if dcfg.noise_scale > 0:
                temp = temp + dcfg.noise_scale * _smooth_noise(noise_rng, shape, 3.0)
                moist = moist + 0.3 * dcfg.noise_scale * _smooth_noise(noise_rng, shape, 3.0)
        if t > 0:
            drift += 1.5 * np.array(base(t - 1.0))[::-1]
        uplift = u * dzdx + v * dzdy
        psi_n = psi / psi_scale
        f_u, f_v = 10.0 * u, 10.0 * v
        f_t = temp - 6.5 * z
        f_q = np.clip(moist - 1.5 * z, 0.1, None)
        f_p = 1010.0 + 8.0 * psi_n - 100.0 * z
        f_tcc = 100.0 * expit(0.9 * (f_q - 8.0) + 6.0 * uplift)
        f_ssrd = insolation * (1.0 - 0.75 * f_tcc / 100.0)
        fine = (f_u, f_v, f_t, f_q, f_p, f_tcc, f_ssrd)
        regional[t] = np.stack([f[rs] for f in fine], axis=-1)
        if t % 6 == 0:
            j = t // 6
            surf = np.stack(fine[:mcfg.n_surface], axis=-1)
            hidden = np.sin(hidden_k[0] * (x - drift[1]) + hidden_k[1] * (y - drift[0]) + hidden_phi)
            upper = np.stack([upper_base[i] + 60.0 * (upper_mix[i, 0] * psi_n + upper_mix[i, 1] * hidden)
                              for i in range(n_upper)], axis=-1)
            globals_[j] = np.concatenate([block_mean(upper), block_mean(surf), static], axis=-1)
            if keep_fine:
                fine_keep[j] = surf

    return SyntheticData(
        global_frames=globals_,
        regional_frames=regional,
        topography=z[rs][..., None],
        land_sea_mask=land[rs][..., None],
        global_lats=glats,
        global_lons=glons,
        regional_lats=flats[r0:r0 + mcfg.region_h],
        regional_lons=flons[c0:c0 + mcfg.region_w],
        start_day_of_year=dcfg.start_day_of_year,
        fine_surface=fine_keep,
    )


# -------------------------------------------------------------- normalisation


@dataclass(frozen=True)
class ZScore:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, frames: np.ndarray) -> "ZScore":
        flat = np.asarray(frames, dtype=np.float64).reshape(-1, frames.shape[-1])
        return cls(flat.mean(axis=0), flat.std(axis=0))

    @property
    def scale(self) -> np.ndarray:
        return np.maximum(self.std, SIGMA_FLOOR)

    def forward(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) - self.mean) / self.scale

    def inverse(self, z: np.ndarray) -> np.ndarray:
        return np.asarray(z, dtype=np.float64) * self.scale + self.mean


def zscore(field: np.ndarray, stats: ZScore) -> np.ndarray:
    return stats.forward(field)


def zscore_inverse(field: np.ndarray, stats: ZScore) -> np.ndarray:
    return stats.inverse(field)


# --------------------------------------------------------------------- splits


def split_bounds(n_hours: int) -> dict[str, tuple[int, int]]:
    """Chronological 70/15/15 split; inner boundaries fall on 6-hour multiples."""
    b1 = int(round(0.70 * n_hours / 6.0)) * 6
    b2 = int(round(0.85 * n_hours / 6.0)) * 6
    return {"train": (0, b1), "val": (b1, b2), "test": (b2, n_hours)}


@dataclass
class Split:
    """One chronological slice in normalised units, ready to serve model inputs.

    ``regional`` holds hours ``hour0 ..``; ``global_`` holds the 6-hourly states
    whose hours lie in the slice, starting at ``global_hour0``.
    """

    name: str
    hour0: int
    regional: np.ndarray
    global_: np.ndarray
    global_hour0: int
    topography: np.ndarray
    land_sea_mask: np.ndarray
    start_day_of_year: int
    pred_channels: int

    @property
    def hour_end(self) -> int:
        return self.hour0 + self.regional.shape[0]

    def init_hours(self, steps: int = 1) -> list[int]:
        """Analysis hours with 5 h of history and ``steps`` 6-hour steps of truth inside the slice."""
        first = self.hour0 + N_FRAMES - 1
        first += (-first) % 6
        last = self.hour_end - 1 - 6 * steps
        return list(range(first, last + 1, 6))

    def clock(self, hour: int) -> tuple[float, float]:
        doy = (self.start_day_of_year - 1 + hour // 24) % 365 + 1
        return float(hour % 24), float(doy)

    def global_state(self, hour: int) -> np.ndarray:
        if hour % 6:
            raise ValueError(f"no global state at hour {hour}")
        j = (hour - self.global_hour0) // 6
        if not 0 <= j < self.global_.shape[0]:
            raise IndexError(f"hour {hour} outside split {self.name}")
        return self.global_[j]

    def regional_frame(self, hour: int) -> np.ndarray:
        i = hour - self.hour0
        if not 0 <= i < self.regional.shape[0]:
            raise IndexError(f"hour {hour} outside split {self.name}")
        return self.regional[i]

    def regional_state(self, hour: int) -> RegionalState:
        frames = [Tensor(self.regional_frame(hour - N_FRAMES + 1 + i)) for i in range(N_FRAMES)]
        hod, doy = self.clock(hour)
        return RegionalState(frames, self.topography, self.land_sea_mask, hod, doy)

    def inputs(self, hour: int) -> tuple[Tensor, RegionalState]:
        return Tensor(self.global_state(hour)), self.regional_state(hour)

    def regional_targets(self, hour: int, step: int = 0) -> list[np.ndarray]:
        base = hour + 6 * step
        return [self.regional_frame(base + dt) for dt in range(1, N_FRAMES + 1)]

    def global_target(self, hour: int, step: int = 0) -> np.ndarray:
        return self.global_state(hour + 6 * (step + 1))[..., :self.pred_channels]


@dataclass
class Dataset:
    """Normalised splits plus the statistics and geometry needed to go back to physical units."""

    splits: dict[str, Split]
    regional_stats: ZScore
    global_stats: ZScore
    climatology: np.ndarray  # 24 x h x w x 7, physical units, training split
    regional_lats: np.ndarray
    regional_lons: np.ndarray
    global_lats: np.ndarray
    global_lons: np.ndarray

    def __getitem__(self, name: str) -> Split:
        return self.splits[name]


def build_dataset(data: SyntheticData, mcfg: ModelConfig) -> Dataset:
    bounds = split_bounds(data.n_hours)
    a, b = bounds["train"]
    reg_stats = ZScore.fit(data.regional_frames[a:b])
    glob_stats = ZScore.fit(data.global_frames[(a + 5) // 6:(b - 1) // 6 + 1])
    clim = hourly_climatology(data.regional_frames[a:b], np.arange(a, b))
    splits = {}
    for name, (lo, hi) in bounds.items():
        g0 = lo + (-lo) % 6
        glo, ghi = g0 // 6, (hi - 1) // 6 + 1
        splits[name] = Split(
            name=name,
            hour0=lo,
            regional=reg_stats.forward(data.regional_frames[lo:hi]),
            global_=glob_stats.forward(data.global_frames[glo:ghi]),
            global_hour0=g0,
            topography=np.asarray(data.topography, dtype=np.float64),
            land_sea_mask=np.asarray(data.land_sea_mask, dtype=np.float64),
            start_day_of_year=data.start_day_of_year,
            pred_channels=mcfg.pred_channels,
        )
    return Dataset(splits, reg_stats, glob_stats, clim, data.regional_lats, data.regional_lons,
                   data.global_lats, data.global_lons)


def make_stations(data: SyntheticData, n: int, seed: int) -> StationSet:
    """Stations placed uniformly inside the regional grid's node hull."""
    rng = np.random.default_rng([seed, 2])
    lats, lons = data.regional_lats, data.regional_lons
    out = []
    for i in range(n):
        lat = rng.uniform(min(lats[0], lats[-1]), max(lats[0], lats[-1]))
        lon = rng.uniform(min(lons[0], lons[-1]), max(lons[0], lons[-1]))
        out.append(Station(f"S{i:03d}", round(float(lat), 4), round(float(lon), 4)))
    return StationSet(out)


# ---------------------------------------------------------------------- files


def iso_timestamp(day_of_year: int, hour: int = 0) -> str:
    start = _dt.datetime(REFERENCE_YEAR, 1, 1, tzinfo=_dt.timezone.utc)
    stamp = start + _dt.timedelta(days=day_of_year - 1, hours=hour)
    return stamp.strftime("%Y-%m-%dT%H:%M:%SZ")


def geometry_manifest(lats: np.ndarray, lons: np.ndarray, variables, timestamp: str) -> dict[str, str]:
    dlat = float(lats[1] - lats[0]) if len(lats) > 1 else 0.0
    dlon = float(lons[1] - lons[0]) if len(lons) > 1 else 0.0
    return {"lat0": repr(float(lats[0])), "dlat": repr(dlat), "lon0": repr(float(lons[0])),
            "dlon": repr(dlon), "variables": ",".join(variables), "timestamp": timestamp}


def axes_from_manifest(meta: dict[str, str], rows: int, cols: int) -> tuple[np.ndarray, np.ndarray]:
    lats = float(meta["lat0"]) + float(meta["dlat"]) * np.arange(rows)
    lons = float(meta["lon0"]) + float(meta["dlon"]) * np.arange(cols)
    return lats, lons


def global_variable_names(mcfg: ModelConfig) -> list[str]:
    upper = [f"Z{j}_L{p}" if mcfg.n_upper_vars > 1 else f"Z_L{p}"
             for j in range(mcfg.n_upper_vars) for p in range(mcfg.n_levels)]
    return upper + list(REGIONAL_VARIABLES[:mcfg.n_surface]) + ["OROG", "LSM"]


def file_sha256(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_dataset(data: SyntheticData, cfg: RunConfig, out_dir: str | Path) -> dict[str, str]:
    """Write per-split GRID1 files (f32 fields) plus statics, stations and manifests.

    Returns the artifact hashes recorded in ``dataset.manifest``.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    mcfg = cfg.model
    bounds = split_bounds(data.n_hours)
    written = []
    for name, (lo, hi) in bounds.items():
        g0 = lo + (-lo) % 6
        glo, ghi = g0 // 6, (hi - 1) // 6 + 1
        grid1.write(out / f"{name}.grd", {
            "regional": data.regional_frames[lo:hi].astype(np.float32),
            "global": data.global_frames[glo:ghi].astype(np.float32),
            "hours": np.arange(lo, hi, dtype=np.float64),
            "global_hours": np.arange(g0, hi, 6, dtype=np.float64),
        })
        written.append(f"{name}.grd")
    grid1.write(out / "static.grd", {
        "topography": data.topography.astype(np.float64),
        "land_sea_mask": data.land_sea_mask.astype(np.float64),
        "start_day_of_year": np.array([float(data.start_day_of_year)]),
    })
    written.append("static.grd")
    ts = iso_timestamp(data.start_day_of_year)
    grid1.write_manifest(out / "regional.manifest",
                         geometry_manifest(data.regional_lats, data.regional_lons, REGIONAL_VARIABLES, ts))
    grid1.write_manifest(out / "global.manifest",
                         geometry_manifest(data.global_lats, data.global_lons, global_variable_names(mcfg), ts))
    make_stations(data, cfg.data.n_stations, cfg.data.seed).write_csv(out / "stations.csv")
    written += ["regional.manifest", "global.manifest", "stations.csv"]
    hashes = {f"sha256.{f}": file_sha256(out / f) for f in written}
    entries = {"config_hash": cfg.hash(), "seed": cfg.data.seed, "n_timesteps": data.n_hours}
    entries.update({f"split.{k}": f"{lo},{hi}" for k, (lo, hi) in bounds.items()})
    entries.update(hashes)
    grid1.write_manifest(out / "dataset.manifest", entries)
    return hashes


def read_dataset(data_dir: str | Path, mcfg: ModelConfig) -> Dataset:
    """Load the files written by :func:`write_dataset` and rebuild the normalised splits."""
    root = Path(data_dir)
    if not (root / "dataset.manifest").exists():
        raise FileNotFoundError(f"{root}: no dataset.manifest (run gen-data first)")
    static = grid1.read(root / "static.grd")
    parts = {name: grid1.read(root / f"{name}.grd") for name in SPLITS}
    reg = np.concatenate([parts[n]["regional"] for n in SPLITS]).astype(np.float64)
    glob = np.concatenate([parts[n]["global"] for n in SPLITS]).astype(np.float64)
    if glob.shape[1:] != (mcfg.global_h, mcfg.global_w, mcfg.channels):
        raise ConfigError(f"model: dataset global grid {glob.shape[1:]} does not match the config")
    if reg.shape[1:] != (mcfg.region_h, mcfg.region_w, mcfg.n_regional_vars):
        raise ConfigError(f"model: dataset regional grid {reg.shape[1:]} does not match the config")
    rmeta = grid1.read_manifest(root / "regional.manifest")
    gmeta = grid1.read_manifest(root / "global.manifest")
    rlats, rlons = axes_from_manifest(rmeta, reg.shape[1], reg.shape[2])
    glats, glons = axes_from_manifest(gmeta, glob.shape[1], glob.shape[2])
    data = SyntheticData(glob, reg, static["topography"], static["land_sea_mask"], glats, glons,
                         rlats, rlons, int(static["start_day_of_year"][0]))
    return build_dataset(data, mcfg)

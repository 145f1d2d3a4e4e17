"""Verification metrics: latitude weighting, RMSE, ACC and station interpolation."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .tensor import ContractError, DimensionError


def latitude_weights(lats) -> np.ndarray:
    """cos(lat) normalised to unit mean over rows; poles are rejected."""
    lats = np.asarray(lats, dtype=np.float64)
    if lats.ndim != 1 or lats.size == 0:
        raise DimensionError("latitudes must be a non-empty vector")
    if np.any(np.abs(lats) >= 90.0):
        raise ContractError("latitude weights are undefined at the poles")
    c = np.cos(np.deg2rad(lats))
    return c / c.mean()


def _check(pred: np.ndarray, truth: np.ndarray, lats) -> np.ndarray:
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape or pred.ndim != 3:
        raise DimensionError(f"fields must be matching h x w x V arrays: {pred.shape} vs {truth.shape}")
    if len(lats) != pred.shape[0]:
        raise DimensionError("one latitude per row required")
    return latitude_weights(lats)[:, None, None]


def lat_weighted_rmse(pred, truth, lats) -> np.ndarray:
    """Per-variable sqrt of the latitude-weighted mean squared error."""
    alpha = _check(pred, truth, lats)
    err = (np.asarray(pred, dtype=np.float64) - np.asarray(truth, dtype=np.float64)) ** 2
    return np.sqrt((alpha * err).mean(axis=(0, 1)))


def headline_rmse(pred, truth, lats) -> float:
    """Unweighted mean of per-variable RMSEs."""
    return float(lat_weighted_rmse(pred, truth, lats).mean())


def acc(pred, truth, climatology, lats) -> np.ndarray:
    """Per-variable latitude-weighted anomaly correlation; NaN marks zero anomaly variance."""
    alpha = _check(pred, truth, lats)
    clim = np.asarray(climatology, dtype=np.float64)
    if clim.shape != np.shape(pred):
        raise DimensionError(f"climatology {clim.shape} does not match fields {np.shape(pred)}")
    a = np.asarray(pred, dtype=np.float64) - clim
    b = np.asarray(truth, dtype=np.float64) - clim
    num = (alpha * a * b).sum(axis=(0, 1))
    den = np.sqrt((alpha * a * a).sum(axis=(0, 1)) * (alpha * b * b).sum(axis=(0, 1)))
    out = np.full(num.shape, np.nan)
    ok = den > 0
    out[ok] = np.clip(num[ok] / den[ok], -1.0, 1.0)
    return out


def hourly_climatology(frames: np.ndarray, hours: np.ndarray) -> np.ndarray:
    """Per (hour-of-day, cell, variable) mean: frames T x h x w x V -> 24 x h x w x V."""
    frames = np.asarray(frames, dtype=np.float64)
    hod = np.asarray(hours) % 24
    clim = np.zeros((24,) + frames.shape[1:])
    for hour in range(24):
        sel = hod == hour
        if not sel.any():
            raise ContractError(f"no training frames at hour {hour}")
        clim[hour] = frames[sel].mean(axis=0)
    return clim


# ---------------------------------------------------------------- stations


@dataclass
class Station:
    id: str
    lat: float
    lon: float
    values: tuple[float, ...] = ()


@dataclass
class StationSet:
    stations: list[Station] = field(default_factory=list)

    @classmethod
    def read_csv(cls, path: str | Path) -> "StationSet":
        out = []
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            if [h.strip() for h in header[:3]] != ["id", "lat", "lon"]:
                raise ValueError(f"{path}: header must start with id,lat,lon")
            for row in reader:
                if row:
                    out.append(Station(row[0], float(row[1]), float(row[2]),
                                       tuple(float(v) for v in row[3:])))
        return cls(out)

    def write_csv(self, path: str | Path, value_names: tuple[str, ...] = ()) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["id", "lat", "lon", *value_names])
            for s in self.stations:
                writer.writerow([s.id, repr(s.lat), repr(s.lon), *(repr(v) for v in s.values)])


@dataclass
class StationValue:
    id: str
    values: np.ndarray | None
    error: str | None = None


def station_grid_coords(lats: np.ndarray, lons: np.ndarray, lat: float, lon: float) -> tuple[float, float]:
    """Continuous (row, col) of a point on a regular lat/lon grid."""
    lats = np.asarray(lats, dtype=np.float64)
    lons = np.asarray(lons, dtype=np.float64)
    dlat = lats[1] - lats[0] if len(lats) > 1 else 1.0
    dlon = lons[1] - lons[0] if len(lons) > 1 else 1.0
    return (lat - lats[0]) / dlat, (lon - lons[0]) / dlon


def station_interpolate(field: np.ndarray, lats, lons, stations: StationSet) -> list[StationValue]:
    """Bilinear interpolation in lat/lon degrees; out-of-grid stations yield an error record."""
    field = np.asarray(field, dtype=np.float64)
    h, w, _ = field.shape
    out = []
    for st in stations.stations:
        r, c = station_grid_coords(lats, lons, st.lat, st.lon)
        tol = 1e-9
        if not (-tol <= r <= h - 1 + tol and -tol <= c <= w - 1 + tol):
            out.append(StationValue(st.id, None, f"station ({st.lat}, {st.lon}) outside grid"))
            continue
        r = min(max(r, 0.0), h - 1.0)
        c = min(max(c, 0.0), w - 1.0)
        r0 = min(int(math.floor(r)), max(h - 2, 0))
        c0 = min(int(math.floor(c)), max(w - 2, 0))
        r1, c1 = min(r0 + 1, h - 1), min(c0 + 1, w - 1)
        fr, fc = r - r0, c - c0
        val = ((1 - fr) * (1 - fc) * field[r0, c0] + (1 - fr) * fc * field[r0, c1]
               + fr * (1 - fc) * field[r1, c0] + fr * fc * field[r1, c1])
        out.append(StationValue(st.id, val))
    return out

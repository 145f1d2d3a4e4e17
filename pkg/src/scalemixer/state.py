"""Plain data carried between the model, data and metrics layers."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .config import N_FRAMES, REGIONAL_VARIABLES, ModelConfig
from .tensor import ContractError, GeometryError, Tensor, mul, sub


@dataclass
class GridField:
    """Georeferenced lat x lon x channels array (rows run north to south)."""

    data: np.ndarray
    lats: np.ndarray
    lons: np.ndarray
    variables: tuple[str, ...] = ()

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 3:
            raise GeometryError(f"GridField data must be h x w x c, got {self.data.shape}")
        h, w, c = self.data.shape
        if len(self.lats) != h or len(self.lons) != w:
            raise GeometryError("lat/lon axes do not match the data")
        if self.variables and len(self.variables) != c:
            raise GeometryError("variable names do not match the channel count")


@dataclass
class TokenSequence:
    tokens: Tensor  # n x d
    grid: tuple[int, int]

    def __post_init__(self):
        if self.tokens.shape[0] != self.grid[0] * self.grid[1]:
            raise GeometryError(f"{self.tokens.shape[0]} tokens do not fill grid {self.grid}")

    def with_tokens(self, tokens: Tensor) -> "TokenSequence":
        return replace(self, tokens=tokens)


@dataclass
class KeyPositionSet:
    index: np.ndarray  # m flat token indices, selection order
    coords: np.ndarray  # m x 2 normalised [0, 1]^2 token-grid coordinates
    scores: Tensor  # m importance values Pr[c]
    embeddings: Tensor  # m x d, Pr[c] * S[c]
    probabilities: Tensor  # N, sums to one


@dataclass
class RegionalState:
    """Six hourly frames ending at the analysis time, plus static fields."""

    history: Sequence[Tensor]  # 6 frames of h x w x V_reg, oldest first
    topography: np.ndarray  # h x w x 1
    land_sea_mask: np.ndarray  # h x w x 1
    hour_of_day: float
    day_of_year: float

    def __post_init__(self):
        self.history = [h if isinstance(h, Tensor) else Tensor(h) for h in self.history]
        if len(self.history) != N_FRAMES:
            raise ContractError(f"regional history needs {N_FRAMES} frames, got {len(self.history)}")
        shape = self.history[0].shape
        if len(shape) != 3 or shape[2] != len(REGIONAL_VARIABLES):
            raise GeometryError(f"regional frames must be h x w x {len(REGIONAL_VARIABLES)}")
        if any(f.shape != shape for f in self.history):
            raise GeometryError("regional frames differ in shape")
        if self.topography.shape != shape[:2] + (1,) or self.land_sea_mask.shape != shape[:2] + (1,):
            raise GeometryError("static regional fields do not match the frames")

    @property
    def last(self) -> Tensor:
        return self.history[-1]


@dataclass(frozen=True)
class RegionGeometry:
    """Affine map between the regional token grid and the global token grid.

    With p = 5P each regional token covers exactly one global token, so the
    region occupies the global token block starting at ``offset``.
    """

    global_grid: tuple[int, int]
    regional_grid: tuple[int, int]
    offset: tuple[int, int]  # global token (row, col) of regional token (0, 0)

    @classmethod
    def from_config(cls, cfg: ModelConfig) -> "RegionGeometry":
        if cfg.regional_patch != 5 * cfg.patch:
            raise GeometryError("regional patch must be 5x the global patch")
        p = cfg.regional_patch
        if cfg.region_row0 % p or cfg.region_col0 % p:
            raise GeometryError("region boundary cuts through a global patch")
        geom = cls(cfg.token_grid, cfg.regional_token_grid, (cfg.region_row0 // p, cfg.region_col0 // p))
        gr, gc = geom.global_grid
        rr, rc = geom.regional_grid
        if geom.offset[0] + rr > gr or geom.offset[1] + rc > gc:
            raise GeometryError("region extends past the global token grid")
        return geom

    @property
    def n(self) -> int:
        return self.regional_grid[0] * self.regional_grid[1]

    @property
    def aligned_index(self) -> np.ndarray:
        rr, rc = self.regional_grid
        r0, c0 = self.offset
        rows = np.arange(r0, r0 + rr)[:, None]
        cols = np.arange(c0, c0 + rc)[None, :]
        return (rows * self.global_grid[1] + cols).reshape(-1)

    @property
    def _norm(self) -> np.ndarray:
        gr, gc = self.global_grid
        return np.array([max(gr - 1, 1), max(gc - 1, 1)], dtype=np.float64)

    def normalise(self, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
        """Integer global token indices -> [0, 1]^2 coordinates."""
        return np.stack([rows, cols], axis=-1) / self._norm

    def to_regional(self, coords: Tensor) -> Tensor:
        """Normalised global coordinates -> continuous regional token-grid coordinates."""
        return sub(mul(coords, self._norm), np.asarray(self.offset, dtype=np.float64))


@dataclass
class ForecastBundle:
    global_pred: Tensor  # H x W x C_pred at +6 h
    regional: list[Tensor] = field(default_factory=list)  # +1 h ... +6 h, each h x w x V_reg

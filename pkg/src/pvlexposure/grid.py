"""Planar study grid: projection, binning and distances.

Coordinates are projected with a local equirectangular approximation about a
reference point, then binned into square cells with half-open intervals
``[lower, upper)`` along both axes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

EARTH_RADIUS_M = 6_371_000.0


class InvalidCoordinateError(ValueError):
    """Raised for non-finite or out-of-range coordinates."""


class PointLocation(NamedTuple):
    easting: float
    northing: float


class CellId(NamedTuple):
    col: int
    row: int


class _OutOfGrid:
    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self):
        return "OUT_OF_GRID"

    def __bool__(self):
        return False


OUT_OF_GRID = _OutOfGrid()


@dataclass(frozen=True)
class GridSpec:
    """Square-celled planar grid anchored at a projected origin.

    Parameters
    ----------
    ref_lat, ref_lon : float
        Reference point of the local projection, in degrees.
    origin_easting, origin_northing : float
        Lower-left corner of the grid in projected meters.
    cell_size : float
        Edge length of a cell in meters.
    n_cols, n_rows : int
        Grid dimensions.
    """

    ref_lat: float = -28.4
    ref_lon: float = 32.2
    origin_easting: float = 0.0
    origin_northing: float = 0.0
    cell_size: float = 100.0
    n_cols: int = 200
    n_rows: int = 200

    def __post_init__(self):
        if not self.cell_size > 0:
            raise ValueError(f"cell_size must be positive, got {self.cell_size}")
        if self.n_cols < 1 or self.n_rows < 1:
            raise ValueError(f"grid must have at least one cell, got {self.n_cols}x{self.n_rows}")
        if not (math.isfinite(self.ref_lat) and -90 <= self.ref_lat <= 90):
            raise ValueError(f"ref_lat out of range: {self.ref_lat}")
        if not (math.isfinite(self.ref_lon) and -180 <= self.ref_lon <= 180):
            raise ValueError(f"ref_lon out of range: {self.ref_lon}")

    @property
    def n_cells(self) -> int:
        return self.n_cols * self.n_rows

    @property
    def extent(self) -> tuple[float, float, float, float]:
        """(min_easting, min_northing, max_easting, max_northing)."""
        return (
            self.origin_easting,
            self.origin_northing,
            self.origin_easting + self.n_cols * self.cell_size,
            self.origin_northing + self.n_rows * self.cell_size,
        )

    def flat_index(self, col, row):
        """Row-major flat index of a cell (vectorised)."""
        return np.asarray(row) * self.n_cols + np.asarray(col)

    def unflatten(self, idx):
        idx = np.asarray(idx)
        return idx % self.n_cols, idx // self.n_cols

    def centroids(self) -> tuple[np.ndarray, np.ndarray]:
        """Easting and northing of every cell centroid in flat-index order."""
        col, row = self.unflatten(np.arange(self.n_cells))
        return (
            self.origin_easting + (col + 0.5) * self.cell_size,
            self.origin_northing + (row + 0.5) * self.cell_size,
        )


def _check_latlon(lat, lon):
    lat = np.asarray(lat, dtype=float)
    lon = np.asarray(lon, dtype=float)
    if not (np.all(np.isfinite(lat)) and np.all(np.isfinite(lon))):
        raise InvalidCoordinateError("non-finite latitude/longitude")
    if np.any(np.abs(lat) > 90) or np.any(np.abs(lon) > 180):
        raise InvalidCoordinateError("latitude/longitude out of range")
    return lat, lon


def project_array(lat, lon, spec: GridSpec) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised equirectangular projection about ``(spec.ref_lat, spec.ref_lon)``."""
    lat, lon = _check_latlon(lat, lon)
    coslat = math.cos(math.radians(spec.ref_lat))
    easting = EARTH_RADIUS_M * coslat * np.radians(lon - spec.ref_lon)
    northing = EARTH_RADIUS_M * np.radians(lat - spec.ref_lat)
    return easting, northing


def unproject_array(easting, northing, spec: GridSpec) -> tuple[np.ndarray, np.ndarray]:
    easting = np.asarray(easting, dtype=float)
    northing = np.asarray(northing, dtype=float)
    coslat = math.cos(math.radians(spec.ref_lat))
    lat = spec.ref_lat + np.degrees(northing / EARTH_RADIUS_M)
    lon = spec.ref_lon + np.degrees(easting / (EARTH_RADIUS_M * coslat))
    return lat, lon


def project(lat: float, lon: float, spec: GridSpec) -> PointLocation:
    e, n = project_array(lat, lon, spec)
    return PointLocation(float(e), float(n))


def unproject(p: PointLocation, spec: GridSpec) -> tuple[float, float]:
    lat, lon = unproject_array(p.easting, p.northing, spec)
    return float(lat), float(lon)


def cells_of(easting, northing, spec: GridSpec) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised binning. Out-of-grid points get ``col = row = -1``."""
    easting = np.asarray(easting, dtype=float)
    northing = np.asarray(northing, dtype=float)
    col = np.floor((easting - spec.origin_easting) / spec.cell_size)
    row = np.floor((northing - spec.origin_northing) / spec.cell_size)
    inside = (
        np.isfinite(col) & np.isfinite(row)
        & (col >= 0) & (col < spec.n_cols)
        & (row >= 0) & (row < spec.n_rows)
    )
    col = np.where(inside, col, -1).astype(np.int64)
    row = np.where(inside, row, -1).astype(np.int64)
    return col, row


def cell_of(p: PointLocation, spec: GridSpec):
    """Cell containing ``p`` or :data:`OUT_OF_GRID`."""
    col, row = cells_of(p[0], p[1], spec)
    if col < 0:
        return OUT_OF_GRID
    return CellId(int(col), int(row))


def in_grid(p: PointLocation, spec: GridSpec) -> bool:
    return cell_of(p, spec) is not OUT_OF_GRID


def centroid(c: CellId, spec: GridSpec) -> PointLocation:
    col, row = c
    if not (0 <= col < spec.n_cols and 0 <= row < spec.n_rows):
        raise IndexError(f"cell {tuple(c)} outside {spec.n_cols}x{spec.n_rows} grid")
    return PointLocation(
        spec.origin_easting + (col + 0.5) * spec.cell_size,
        spec.origin_northing + (row + 0.5) * spec.cell_size,
    )


def distance(a: PointLocation, b: PointLocation) -> float:
    return math.hypot(a[0] - b[0], a[1] - b[1])


def cell_polygon_lonlat(c: CellId, spec: GridSpec) -> list[list[float]]:
    """Closed ring of a cell footprint as ``[lon, lat]`` pairs (GeoJSON order)."""
    e0 = spec.origin_easting + c[0] * spec.cell_size
    n0 = spec.origin_northing + c[1] * spec.cell_size
    es = np.array([e0, e0 + spec.cell_size, e0 + spec.cell_size, e0, e0])
    ns = np.array([n0, n0, n0 + spec.cell_size, n0 + spec.cell_size, n0])
    lat, lon = unproject_array(es, ns, spec)
    return [[round(float(x), 8), round(float(y), 8)] for x, y in zip(lon, lat)]

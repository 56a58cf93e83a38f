"""Activity distributions from GPS trajectories and level-gamma activity spaces."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
import pandas as pd
from sklearn.base import BaseEstimator, TransformerMixin

from .grid import CellId, GridSpec, cells_of, project_array

DEFAULT_GAP_CAP = 1800.0
# Cumulative-weight comparisons tolerate float round-off in the running sum.
COVERAGE_EPS = 1e-12


class InsufficientDataError(ValueError):
    pass


class EmptyDistributionError(ValueError):
    pass


@dataclass(frozen=True)
class GpsFix:
    participant_id: str
    timestamp: float  # UTC seconds
    lat: float
    lon: float


@dataclass
class ActivityDistribution:
    """Fraction of observed time per grid cell for one participant.

    ``weights`` omits zero-time cells and sums to one when time is
    normalised over in-area time (the default).
    """

    participant_id: str
    weights: dict
    observed_seconds: float
    in_area_fraction: float
    _ranked: tuple | None = field(default=None, repr=False, compare=False)

    def ranked(self) -> tuple[list, np.ndarray]:
        """Cells by descending weight, ties broken by ascending ``CellId``."""
        if self._ranked is None:
            cells = sorted(self.weights, key=lambda c: (-self.weights[c], c))
            self._ranked = (cells, np.array([self.weights[c] for c in cells], dtype=float))
        return self._ranked

    @property
    def cells(self) -> set:
        return set(self.weights)


@dataclass(frozen=True)
class ActivitySpace:
    participant_id: str
    gamma: float
    cells: frozenset
    covered_fraction: float

    def __len__(self):
        return len(self.cells)


def _fixes_frame(fixes) -> pd.DataFrame:
    if isinstance(fixes, pd.DataFrame):
        return fixes
    return pd.DataFrame([f.__dict__ for f in fixes], columns=["participant_id", "timestamp", "lat", "lon"])


def ingest_trajectory(fixes, spec: GridSpec, gap_cap: float = DEFAULT_GAP_CAP,
                      total_time_denominator: str = "in_area") -> ActivityDistribution:
    """Attribute inter-fix time to grid cells for a single participant.

    Each interval is credited to the cell of its earlier fix and capped at
    ``gap_cap`` seconds. Intervals starting outside the grid count as
    out-of-area time.

    Raises
    ------
    InsufficientDataError
        Fewer than two fixes with distinct timestamps.
    EmptyDistributionError
        No attributed time falls inside the grid.
    """
    if total_time_denominator not in ("in_area", "all"):
        raise ValueError(f"total_time_denominator must be 'in_area' or 'all', got {total_time_denominator!r}")
    df = _fixes_frame(fixes)
    pids = df["participant_id"].astype(str).unique()
    if len(pids) > 1:
        raise ValueError(f"expected one participant, got {len(pids)}")
    pid = str(pids[0]) if len(pids) else ""
    t = df["timestamp"].to_numpy(dtype=float)
    order = np.argsort(t, kind="stable")
    t = t[order]
    keep = np.ones(len(t), dtype=bool)
    keep[1:] = np.diff(t) > 0
    order, t = order[keep], t[keep]
    if len(t) < 2:
        raise InsufficientDataError(f"participant {pid}: fewer than 2 usable fixes")
    e, n = project_array(df["lat"].to_numpy(dtype=float)[order], df["lon"].to_numpy(dtype=float)[order], spec)
    col, row = cells_of(e[:-1], n[:-1], spec)
    dt = np.minimum(np.diff(t), gap_cap)
    inside = col >= 0
    total = float(dt.sum())
    in_area = float(dt[inside].sum())
    if in_area <= 0:
        raise EmptyDistributionError(f"participant {pid}: no observed time inside the grid")
    flat = spec.flat_index(col[inside], row[inside])
    sums = np.bincount(flat, weights=dt[inside], minlength=0)
    nz = np.flatnonzero(sums)
    denom = in_area if total_time_denominator == "in_area" else total
    cc, rr = spec.unflatten(nz)
    weights = {CellId(int(c), int(r)): float(s / denom) for c, r, s in zip(cc, rr, sums[nz])}
    return ActivityDistribution(pid, weights, total, in_area / total)


def ingest_all(fixes: pd.DataFrame, spec: GridSpec, gap_cap: float = DEFAULT_GAP_CAP,
               total_time_denominator: str = "in_area") -> tuple[list[ActivityDistribution], dict]:
    """Ingest every participant; failures are collected rather than raised."""
    dists, failures = [], {}
    for pid, g in fixes.groupby(fixes["participant_id"].astype(str), sort=True):
        try:
            dists.append(ingest_trajectory(g, spec, gap_cap, total_time_denominator))
        except (InsufficientDataError, EmptyDistributionError) as exc:
            failures[pid] = str(exc)
    return dists, failures


def activity_space(dist: ActivityDistribution, gamma: float) -> ActivitySpace:
    """Smallest cell set covering at least ``gamma`` percent of observed time.

    Taking cells in descending weight order gives, for every size k, the
    heaviest k-subset, so the shortest covering prefix has minimal
    cardinality and the largest coverage among minimal sets.
    """
    if not 0 < gamma <= 100:
        raise ValueError(f"gamma must lie in (0, 100], got {gamma}")
    cells, w = dist.ranked()
    total = w.sum()
    if gamma == 100:
        k = len(cells)
    else:
        # relative to total so that 'all' denominators still cover the observed in-area time
        cum = np.cumsum(w) / total
        k = int(np.searchsorted(cum, gamma / 100.0 - COVERAGE_EPS, side="left")) + 1
        k = min(k, len(cells))
    return ActivitySpace(dist.participant_id, gamma, frozenset(cells[:k]), float(w[:k].sum() / total))


def activity_space_sizes(dist: ActivityDistribution, gammas: Iterable[float]) -> dict[float, int]:
    return {g: len(activity_space(dist, g)) for g in gammas}


def collective_activity_space(dists: Sequence[ActivityDistribution]) -> set:
    """Union of the participants' full activity spaces."""
    if not dists:
        raise ValueError("need at least one activity distribution")
    out: set = set()
    for d in dists:
        out |= d.cells
    return out


class TrajectoryBinner(TransformerMixin, BaseEstimator):
    """Turn a GPS fix table into per-participant activity distributions.

    ``transform`` takes a frame with ``participant_id, timestamp, lat, lon``
    (timestamp in UTC seconds) and returns a list of
    :class:`ActivityDistribution`; participants that cannot be ingested are
    listed in ``failures_``.
    """

    def __init__(self, spec=None, gap_cap=DEFAULT_GAP_CAP, total_time_denominator="in_area"):
        self.spec = spec
        self.gap_cap = gap_cap
        self.total_time_denominator = total_time_denominator

    def fit(self, X=None, y=None):
        return self

    def transform(self, X):
        spec = self.spec if self.spec is not None else GridSpec()
        dists, self.failures_ = ingest_all(_fixes_frame(X), spec, self.gap_cap, self.total_time_denominator)
        return dists

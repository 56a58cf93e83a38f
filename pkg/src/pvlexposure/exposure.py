"""Time-weighted contextual exposure and percentile risk groups."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
import pandas as pd

from .activity import ActivityDistribution, ActivitySpace, activity_space
from .surface import METRICS, MetricKind, Surface

logger = logging.getLogger(__name__)

EXPOSURE_COLUMNS = ["participant_id", "metric", "gamma", "value", "n_cells", "masked_dropped", "flag"]


class UndefinedExposureError(ValueError):
    """Every cell of the activity space is masked on the surface."""


class InsufficientSampleError(ValueError):
    pass


@dataclass(frozen=True)
class ExposureRecord:
    participant_id: str
    metric: MetricKind
    gamma: float
    value: float
    n_cells: int
    masked_cells_dropped: int


@dataclass
class RiskGroup:
    label: str
    basis: str
    members: set
    collective_cells: set


def contextual_exposure(dist: ActivityDistribution, space: ActivitySpace, surface: Surface) -> ExposureRecord:
    """Weighted mean of ``surface`` over ``space`` using the participant's time shares.

    Masked cells are dropped from numerator and denominator alike.
    """
    spec = surface.spec
    cells = sorted(space.cells)
    w = np.array([dist.weights[c] for c in cells], dtype=float)
    idx = spec.flat_index(np.array([c[0] for c in cells]), np.array([c[1] for c in cells]))
    v = surface.values[idx]
    ok = ~np.isnan(v)
    if not ok.any():
        raise UndefinedExposureError(
            f"participant {dist.participant_id}: all {len(cells)} cells masked for {surface.metric.value}"
        )
    vk = v[ok]
    # clipping to the value range keeps constant surfaces exact under round-off
    value = float(np.clip(np.dot(w[ok], vk) / w[ok].sum(), vk.min(), vk.max()))
    return ExposureRecord(dist.participant_id, surface.metric, space.gamma, value, len(cells), int((~ok).sum()))


def exposure_matrix(dists: Sequence[ActivityDistribution], surfaces: Mapping, gammas: Sequence[float],
                    failures: Mapping[str, str] | None = None) -> pd.DataFrame:
    """One row per (participant, metric, gamma).

    Per-record failures become rows with a NaN value and a non-empty ``flag``
    instead of aborting the batch. Participants listed in ``failures`` (for
    instance, those whose trajectory could not be ingested) get flagged rows
    for every metric and gamma.
    """
    metrics = [m for m in METRICS if m in surfaces]
    gammas = sorted(gammas)
    rows = []
    entries = [(d.participant_id, d, None) for d in dists]
    entries += [(pid, None, msg) for pid, msg in (failures or {}).items()]
    for pid, dist, msg in sorted(entries, key=lambda e: e[0]):
        spaces = {} if dist is None else {g: activity_space(dist, g) for g in gammas}
        for m in metrics:
            for g in gammas:
                if dist is None:
                    rows.append((pid, m.value, g, np.nan, 0, 0, msg or "no activity distribution"))
                    continue
                try:
                    r = contextual_exposure(dist, spaces[g], surfaces[m])
                    rows.append((pid, m.value, g, r.value, r.n_cells, r.masked_cells_dropped, ""))
                except UndefinedExposureError as exc:
                    rows.append((pid, m.value, g, np.nan, len(spaces[g]), len(spaces[g]), str(exc)))
    return pd.DataFrame(rows, columns=EXPOSURE_COLUMNS)


BASIS_METRICS = {
    "PVL": (MetricKind.MVL, MetricKind.PDV),
    "PVL_P": (MetricKind.MVL_P, MetricKind.PDV_P),
}


def classify_risk(records: pd.DataFrame, basis: str = "PVL_P", hi: float = 80, lo: float = 20,
                  dists: Mapping | None = None,
                  min_participants: int = 5) -> tuple[RiskGroup, RiskGroup]:
    """Joint-percentile risk groups from full-activity-space exposures.

    A participant is high risk when both the MVL and PDV exposures (or their
    population-based analogues) are at or above their ``hi`` percentiles, and
    low risk when both are at or below their ``lo`` percentiles. Percentiles
    use linear interpolation between order statistics.
    """
    if basis not in BASIS_METRICS:
        raise ValueError(f"basis must be one of {sorted(BASIS_METRICS)}, got {basis!r}")
    m1, m2 = (m.value for m in BASIS_METRICS[basis])
    r = records[(records["gamma"] == 100) & records["metric"].isin([m1, m2])]
    wide = r.pivot_table(index="participant_id", columns="metric", values="value", aggfunc="first")
    wide = wide.reindex(columns=[m1, m2]).dropna()
    if len(wide) < min_participants:
        raise InsufficientSampleError(
            f"{basis}: {len(wide)} participants with valid exposures, need {min_participants}"
        )
    a = wide[m1].to_numpy()
    b = wide[m2].to_numpy()
    a_hi, a_lo = np.percentile(a, [hi, lo])
    b_hi, b_lo = np.percentile(b, [hi, lo])
    ids = wide.index.astype(str).to_numpy()
    high = set(ids[(a >= a_hi) & (b >= b_hi)])
    low = set(ids[(a <= a_lo) & (b <= b_lo)])
    if high & low:
        logger.warning("%s: %d participants fall in both risk groups (degenerate exposures)",
                       basis, len(high & low))

    def cells(members):
        out: set = set()
        if dists is not None:
            for pid in members:
                if pid in dists:
                    d = dists[pid]
                    out |= d.cells if isinstance(d, ActivityDistribution) else set(d)
        return out

    return (RiskGroup("high", basis, high, cells(high)), RiskGroup("low", basis, low, cells(low)))

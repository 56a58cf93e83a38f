"""Individual viral-load metrics and truncated Gaussian kernel smoothing."""

from __future__ import annotations

import enum
import logging
import math
import warnings
from dataclasses import dataclass

import numpy as np
import pandas as pd
from scipy.spatial import cKDTree
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .grid import GridSpec

logger = logging.getLogger(__name__)

# 3 km is the two-sided 99% normal quantile (2.5758) times sigma.
DEFAULT_SIGMA_KM = 3.0 / 2.5758
DEFAULT_RADIUS_KM = 3.0


class PipelineOrderError(RuntimeError):
    """A positive record reached metric computation without a viral load."""


class EmptySurfaceError(ValueError):
    pass


class MetricKind(str, enum.Enum):
    MVL = "MVL"
    PDV = "PDV"
    CTI = "CTI"
    MVL_P = "MVL_P"
    PDV_P = "PDV_P"
    CTI_P = "CTI_P"

    @property
    def population_based(self) -> bool:
        return self.value.endswith("_P")

    @property
    def base(self) -> str:
        return self.value.split("_")[0]

    @property
    def log_summary(self) -> bool:
        """Whether grid-cell summaries are reported on the log10 scale."""
        return self.base in ("MVL", "CTI")


METRICS = tuple(MetricKind)


@dataclass(frozen=True)
class KernelParams:
    sigma: float = DEFAULT_SIGMA_KM  # km
    radius: float = DEFAULT_RADIUS_KM  # km

    def __post_init__(self):
        if not (self.sigma > 0 and self.radius > 0):
            raise ValueError("kernel sigma and radius must be positive")


@dataclass(frozen=True)
class CtiParams:
    beta0: float = 0.003
    c: float = 2.45
    v0: float = 150.0
    acts: int = 100
    pdv_threshold: float = 1550.0

    def __post_init__(self):
        if not 0 < self.beta0 < 1:
            raise ValueError("beta0 must lie in (0, 1)")
        if not self.c > 1:
            raise ValueError("c must exceed 1")
        if not self.v0 > 0:
            raise ValueError("v0 must be positive")


def kernel_weight(d, k: KernelParams = KernelParams()):
    """Gaussian weight of a distance ``d`` in meters; zero beyond the radius."""
    d = np.asarray(d, dtype=float)
    s = k.sigma * 1000.0
    w = np.exp(-(d * d) / (2.0 * s * s))
    w = np.where(d <= k.radius * 1000.0, w, 0.0)
    return w if w.ndim else float(w)


def per_act_probability(v1, p: CtiParams = CtiParams()):
    v1 = np.asarray(v1, dtype=float)
    beta1 = p.beta0 * np.power(p.c, np.log10(v1 / p.v0))
    return np.clip(beta1, 0.0, 1.0)


def cti_from_probability(beta1, p: CtiParams = CtiParams()):
    return (1.0 - np.power(1.0 - beta1, p.acts)) * 100.0


def cti_individual(v1, p: CtiParams = CtiParams()):
    """Expected transmission events per 100 acts for viral load ``v1`` (copies/ml).

    ``v1`` must already be floored to a positive value.
    """
    out = cti_from_probability(per_act_probability(v1, p), p)
    return out if np.ndim(out) else float(out)


def individual_metric(rec, kind: MetricKind, p: CtiParams = CtiParams(), floor: float = 1.0):
    """Value of one record for one metric, or ``None`` when the record is excluded."""
    kind = MetricKind(kind)
    positive = rec.hiv_status == "positive"
    if not positive:
        return 0.0 if kind.population_based else None
    vl = rec.viral_load
    if vl is None or (isinstance(vl, float) and math.isnan(vl)):
        raise PipelineOrderError(f"record {rec.person_id}/{rec.year} has no viral load; impute first")
    v = max(float(vl), floor)
    if kind.base == "MVL":
        return math.log10(v)
    if kind.base == "PDV":
        return 100.0 if vl > p.pdv_threshold else 0.0
    return cti_individual(v, p)


def individual_values(df: pd.DataFrame, p: CtiParams = CtiParams(), floor: float = 1.0) -> np.ndarray:
    """Per-record metric matrix with columns in :data:`METRICS` order.

    Excluded entries (HIV-negative records for the positive-only metrics) are NaN.
    """
    positive = (df["hiv_status"] == "positive").to_numpy()
    vl = df["viral_load"].to_numpy(dtype=float)
    if np.isnan(vl[positive]).any():
        raise PipelineOrderError("HIV-positive records without viral load; impute first")
    v = np.maximum(np.where(positive, vl, floor), floor)
    mvl = np.log10(v)
    pdv = np.where(vl > p.pdv_threshold, 100.0, 0.0)
    cti = cti_from_probability(per_act_probability(v, p), p)
    out = np.empty((len(df), 6))
    for j, base in enumerate((mvl, pdv, cti)):
        out[:, j] = np.where(positive, base, np.nan)
        out[:, j + 3] = np.where(positive, base, 0.0)
    return out


def _stencil(spec: GridSpec, radius_m: float):
    reach = int(math.ceil(radius_m / spec.cell_size)) + 1
    r = np.arange(-reach, reach + 1)
    dc, dr = np.meshgrid(r, r, indexing="xy")
    return dc.ravel(), dr.ravel()


def smooth_grid(easting, northing, values, spec: GridSpec, k: KernelParams = KernelParams(),
                chunk: int = 256) -> tuple[np.ndarray, np.ndarray]:
    """Kernel-weighted sums over every grid cell.

    Each point only visits the cells whose centroids lie within the kernel
    radius, via a fixed stencil of cell offsets around its own cell.

    Returns
    -------
    num, den : ndarray of shape (n_cells, n_values)
        Weighted sums of values and of weights, with NaN values skipped.
    """
    easting = np.asarray(easting, dtype=float)
    northing = np.asarray(northing, dtype=float)
    values = np.asarray(values, dtype=float)
    if values.ndim == 1:
        values = values[:, None]
    n_vals = values.shape[1]
    radius_m = k.radius * 1000.0
    two_s2 = 2.0 * (k.sigma * 1000.0) ** 2
    dc, dr = _stencil(spec, radius_m)
    num = np.zeros((spec.n_cells, n_vals))
    den = np.zeros((spec.n_cells, n_vals))
    finite = np.isfinite(values)
    for start in range(0, len(easting), chunk):
        e = easting[start:start + chunk, None]
        n = northing[start:start + chunk, None]
        c0 = np.floor((e - spec.origin_easting) / spec.cell_size).astype(np.int64)
        r0 = np.floor((n - spec.origin_northing) / spec.cell_size).astype(np.int64)
        col = c0 + dc
        row = r0 + dr
        ce = spec.origin_easting + (col + 0.5) * spec.cell_size
        cn = spec.origin_northing + (row + 0.5) * spec.cell_size
        d2 = (ce - e) ** 2 + (cn - n) ** 2
        keep = (d2 <= radius_m * radius_m) & (col >= 0) & (col < spec.n_cols) & (row >= 0) & (row < spec.n_rows)
        pt, _ = np.nonzero(keep)
        idx = (row * spec.n_cols + col)[keep]
        w = np.exp(-d2[keep] / two_s2)
        v = values[start:start + chunk][pt]
        f = finite[start:start + chunk][pt]
        for j in range(n_vals):
            m = f[:, j]
            num[:, j] += np.bincount(idx[m], weights=w[m] * v[m, j], minlength=spec.n_cells)
            den[:, j] += np.bincount(idx[m], weights=w[m], minlength=spec.n_cells)
    return num, den


def smooth_at(easting, northing, values, query_e, query_n, k: KernelParams = KernelParams()) -> np.ndarray:
    """Kernel-weighted means at arbitrary query points using a k-d tree.

    Returns NaN where no contributor lies within the radius.
    """
    pts = np.column_stack([easting, northing]).astype(float)
    values = np.asarray(values, dtype=float)
    squeeze = values.ndim == 1
    if squeeze:
        values = values[:, None]
    q = np.column_stack([query_e, query_n]).astype(float)
    out = np.full((len(q), values.shape[1]), np.nan)
    if len(pts) == 0:
        return out[:, 0] if squeeze else out
    tree = cKDTree(pts)
    radius_m = k.radius * 1000.0
    two_s2 = 2.0 * (k.sigma * 1000.0) ** 2
    for i, nb in enumerate(tree.query_ball_point(q, radius_m)):
        if not nb:
            continue
        nb = np.sort(np.asarray(nb))
        d2 = ((pts[nb] - q[i]) ** 2).sum(axis=1)
        nb, d2 = nb[d2 <= radius_m ** 2], d2[d2 <= radius_m ** 2]
        w = np.exp(-d2 / two_s2)
        v = values[nb]
        m = np.isfinite(v)
        den = (w[:, None] * m).sum(axis=0)
        num = (w[:, None] * np.where(m, v, 0.0)).sum(axis=0)
        with np.errstate(invalid="ignore", divide="ignore"):
            out[i] = np.where(den > 0, num / den, np.nan)
    return out[:, 0] if squeeze else out


@dataclass
class Surface:
    """Grid surface for one metric and year; masked cells are NaN in ``values``."""

    metric: MetricKind
    year: int | None
    spec: GridSpec
    values: np.ndarray

    @property
    def masked(self) -> np.ndarray:
        return np.isnan(self.values)

    def value_at(self, cell) -> float | None:
        v = self.values[self.spec.flat_index(cell[0], cell[1])]
        return None if np.isnan(v) else float(v)


def smooth_surfaces(records: pd.DataFrame, spec: GridSpec, k: KernelParams = KernelParams(),
                    p: CtiParams = CtiParams(), floor: float = 1.0, year=None) -> dict[MetricKind, Surface]:
    """All six metric surfaces from eligible, imputed records."""
    vals = individual_values(records, p, floor)
    num, den = smooth_grid(records["easting"].to_numpy(), records["northing"].to_numpy(), vals, spec, k)
    with np.errstate(invalid="ignore", divide="ignore"):
        est = np.where(den > 0, num / den, np.nan)
    # a weighted mean lies within the contributors' range; trim rounding excess
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        if len(vals):
            est = np.clip(est, np.nanmin(vals, axis=0), np.nanmax(vals, axis=0))
    out = {}
    for j, kind in enumerate(METRICS):
        if np.isnan(est[:, j]).all():
            logger.warning("surface %s (year %s) has no contributors; fully masked", kind.value, year)
        out[kind] = Surface(kind, year, spec, est[:, j])
    return out


def smooth_surface(records: pd.DataFrame, kind, spec: GridSpec, k: KernelParams = KernelParams(),
                   p: CtiParams = CtiParams(), floor: float = 1.0, year=None) -> Surface:
    return smooth_surfaces(records, spec, k, p, floor, year)[MetricKind(kind)]


SUMMARY_COLUMNS = ["mean", "sd", "min", "q1", "median", "q3", "max"]


def summarize(values) -> dict[str, float]:
    v = np.asarray(values, dtype=float)
    if v.size == 0:
        raise EmptySurfaceError("no values to summarize")
    q1, med, q3 = np.quantile(v, [0.25, 0.5, 0.75])
    return {
        "mean": float(v.mean()),
        "sd": float(v.std(ddof=1)) if v.size > 1 else 0.0,
        "min": float(v.min()),
        "q1": float(q1),
        "median": float(med),
        "q3": float(q3),
        "max": float(v.max()),
    }


def surface_summary(s: Surface) -> dict[str, float]:
    """Grid-cell summary over unmasked cells.

    MVL kinds are stored on the log10 scale already; CTI kinds are converted
    to log10 here, dropping cells with a value of exactly zero.
    """
    v = s.values[~s.masked]
    if v.size == 0:
        raise EmptySurfaceError(f"surface {s.metric.value} is fully masked")
    if s.metric.base == "CTI":
        pos = v > 0
        if not pos.all():
            logger.warning("%s: %d zero-valued cells left out of the log10 summary",
                           s.metric.value, int((~pos).sum()))
        v = np.log10(v[pos])
    return summarize(v)


class KernelSmoother(RegressorMixin, BaseEstimator):
    """Truncated Gaussian kernel regression of point values onto locations.

    Parameters
    ----------
    sigma : float, default=1.1647
        Kernel standard deviation in km.
    radius : float, default=3.0
        Truncation radius in km; points farther than this get zero weight.

    Attributes
    ----------
    points_ : ndarray of shape (n_samples, 2)
        Contributor coordinates (easting, northing) in meters.
    values_ : ndarray of shape (n_samples, n_targets)
        Contributor values; NaN marks an excluded contributor.
    """

    def __init__(self, sigma=DEFAULT_SIGMA_KM, radius=DEFAULT_RADIUS_KM):
        self.sigma = sigma
        self.radius = radius

    def _kernel(self):
        return KernelParams(self.sigma, self.radius)

    def fit(self, X, y):
        X = check_array(X, dtype=float)
        if X.shape[1] != 2:
            raise ValueError(f"X must have two columns (easting, northing), got {X.shape[1]}")
        y = np.asarray(y, dtype=float)
        if y.shape[0] != X.shape[0]:
            raise ValueError("X and y have inconsistent lengths")
        self._kernel()
        self._single_output = y.ndim == 1
        self.points_ = X
        self.values_ = y[:, None] if y.ndim == 1 else y
        self.n_features_in_ = 2
        return self

    def predict(self, X):
        """Kernel-weighted means at ``X``; NaN where the total weight is zero."""
        check_is_fitted(self, ["points_", "values_"])
        X = check_array(X, dtype=float)
        out = smooth_at(self.points_[:, 0], self.points_[:, 1], self.values_, X[:, 0], X[:, 1], self._kernel())
        return out[:, 0] if self._single_output else out

    def predict_grid(self, spec: GridSpec):
        """Weighted means at every cell centroid of ``spec`` in flat-index order."""
        check_is_fitted(self, ["points_", "values_"])
        num, den = smooth_grid(self.points_[:, 0], self.points_[:, 1], self.values_, spec, self._kernel())
        with np.errstate(invalid="ignore", divide="ignore"):
            out = np.where(den > 0, num / den, np.nan)
        return out[:, 0] if self._single_output else out

    def score(self, X, y, sample_weight=None):
        X = check_array(X, dtype=float)
        pred = self.predict(X)
        ok = np.isfinite(pred) if pred.ndim == 1 else np.isfinite(pred).all(axis=1)
        w = None if sample_weight is None else np.asarray(sample_weight)[ok]
        return super().score(X[ok], np.asarray(y)[ok], w)

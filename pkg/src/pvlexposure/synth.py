"""Seeded synthetic cohorts, trajectories and brute-force oracle checks."""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from . import nbglmm
from .activity import COVERAGE_EPS, ActivityDistribution, activity_space
from .cohort import COHORT_COLUMNS
from .grid import GridSpec, unproject_array
from .surface import METRICS, KernelParams, MetricKind, individual_values

logger = logging.getLogger(__name__)

GPS_START = 1_622_505_600  # 2021-06-01T00:00:00Z


@dataclass
class ScenarioConfig:
    seed: int = 20240601
    n_persons: int = 5000
    years: tuple = (2019,)
    hiv_prevalence: float = 0.19
    vl_log10_mean: float = 3.24
    vl_log10_sd: float = 0.7
    vl_missing_fraction: float = 0.3
    outside_fraction: float = 0.03
    age_range: tuple = (15.0, 60.0)
    homestead_layout: str = "clustered"
    n_clusters: int = 8
    cluster_spread_m: float = 1500.0
    cluster_vl_sd: float = 0.3
    n_participants_gps: int = 200
    anchors: int = 6
    dwell_exponent: float = 1.5
    dwell_shares: tuple | None = None
    fixes_per_participant: int = 10_000
    sampling_interval: float = 300.0
    visit_mean_fixes: float = 12.0
    noise_m: float = 15.0
    travel: bool = True
    anchor_range_m: float = 6000.0
    gap_probability: float = 0.002
    grid: GridSpec = field(default_factory=GridSpec)

    def __post_init__(self):
        if self.n_persons < 1 or self.n_participants_gps < 1 or self.fixes_per_participant < 1 or self.anchors < 1:
            raise ValueError("scenario counts must be at least 1")
        for name in ("hiv_prevalence", "vl_missing_fraction", "outside_fraction", "gap_probability"):
            v = getattr(self, name)
            if not 0 <= v <= 1:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if self.homestead_layout not in ("uniform", "clustered"):
            raise ValueError(f"unknown homestead_layout {self.homestead_layout!r}")
        if self.dwell_shares is not None and len(self.dwell_shares) != self.anchors:
            raise ValueError("dwell_shares must have one entry per anchor")


def _streams(seed, n):
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]


def _place_points(rng, n, cfg: ScenarioConfig):
    x0, y0, x1, y1 = cfg.grid.extent
    if cfg.homestead_layout == "uniform":
        return rng.uniform(x0, x1, n), rng.uniform(y0, y1, n), np.zeros(n, dtype=int)
    cx = rng.uniform(x0, x1, cfg.n_clusters)
    cy = rng.uniform(y0, y1, cfg.n_clusters)
    k = rng.integers(0, cfg.n_clusters, n)
    e = np.clip(cx[k] + rng.normal(0, cfg.cluster_spread_m, n), x0, np.nextafter(x1, x0))
    nn = np.clip(cy[k] + rng.normal(0, cfg.cluster_spread_m, n), y0, np.nextafter(y1, y0))
    return e, nn, k


def gen_cohort(cfg: ScenarioConfig) -> pd.DataFrame:
    """Person-year records for every person and year in ``cfg``."""
    rng_people, rng_years = _streams(cfg.seed, 2)
    n = cfg.n_persons
    sex = np.where(rng_people.random(n) < 0.5, "male", "female")
    age0 = rng_people.uniform(cfg.age_range[0], cfg.age_range[1], n).round(1)
    positive = rng_people.random(n) < cfg.hiv_prevalence
    e, nn, cluster = _place_points(rng_people, n, cfg)
    cluster_shift = rng_people.normal(0, cfg.cluster_vl_sd, max(cfg.n_clusters, 1))
    if cfg.homestead_layout == "uniform":
        cluster_shift[:] = 0.0
    frames = []
    for i, year in enumerate(cfg.years):
        away = rng_years.random(n) < cfg.outside_fraction
        log_vl = rng_years.normal(cfg.vl_log10_mean + cluster_shift[cluster], cfg.vl_log10_sd, n)
        vl = np.where(positive, np.round(10.0 ** log_vl), np.nan)
        blank = positive & (rng_years.random(n) < cfg.vl_missing_fraction)
        vl[blank] = np.nan
        frames.append(pd.DataFrame({
            "person_id": [f"P{j:06d}" for j in range(n)],
            "year": year,
            "sex": sex,
            "age": age0 + i,
            "hiv_status": np.where(positive, "positive", "negative"),
            "viral_load": vl,
            "easting": np.where(away, np.nan, e.round(2)),
            "northing": np.where(away, np.nan, nn.round(2)),
            "ds_round": f"R{year}",
        }))
    df = pd.concat(frames, ignore_index=True)[COHORT_COLUMNS]
    if cfg.hiv_prevalence > 0 and cfg.vl_missing_fraction < 1:
        # every (round, sex) pool gets a donor so imputation always succeeds
        for (rnd, s), g in df[df["hiv_status"] == "positive"].groupby(["ds_round", "sex"]):
            if g["viral_load"].isna().all():
                j = g.index[0]
                df.loc[j, "viral_load"] = round(10.0 ** cfg.vl_log10_mean)
    return df


def dwell_shares(cfg: ScenarioConfig) -> np.ndarray:
    if cfg.dwell_shares is not None:
        p = np.asarray(cfg.dwell_shares, dtype=float)
    else:
        p = np.arange(1, cfg.anchors + 1, dtype=float) ** (-cfg.dwell_exponent)
    return p / p.sum()


def _participant_track(rng, cfg: ScenarioConfig, shares):
    spec = cfg.grid
    x0, y0, x1, y1 = spec.extent
    cs = spec.cell_size
    home_c = rng.integers(0, spec.n_cols)
    home_r = rng.integers(0, spec.n_rows)
    cols = np.clip(home_c + np.round(rng.normal(0, cfg.anchor_range_m / cs, cfg.anchors)), 0, spec.n_cols - 1)
    rows = np.clip(home_r + np.round(rng.normal(0, cfg.anchor_range_m / cs, cfg.anchors)), 0, spec.n_rows - 1)
    cols[0], rows[0] = home_c, home_r
    ax = x0 + (cols + 0.5) * cs
    ay = y0 + (rows + 0.5) * cs
    n = cfg.fixes_per_participant
    xs = np.empty(n)
    ys = np.empty(n)
    i = 0
    cur = None
    p_stop = 1.0 / max(cfg.visit_mean_fixes, 1.0)
    while i < n:
        k = int(rng.choice(cfg.anchors, p=shares))
        if cfg.travel and cur is not None and k != cur:
            dist = math.hypot(ax[k] - ax[cur], ay[k] - ay[cur])
            steps = min(int(dist // (cs * 3)), n - i)
            if steps > 0:
                f = np.arange(1, steps + 1) / (steps + 1)
                xs[i:i + steps] = ax[cur] + f * (ax[k] - ax[cur]) + rng.normal(0, cs, steps)
                ys[i:i + steps] = ay[cur] + f * (ay[k] - ay[cur]) + rng.normal(0, cs, steps)
                i += steps
                if i >= n:
                    break
        m = min(int(rng.geometric(p_stop)), n - i)
        xs[i:i + m] = ax[k] + rng.normal(0, cfg.noise_m, m) if cfg.noise_m > 0 else ax[k]
        ys[i:i + m] = ay[k] + rng.normal(0, cfg.noise_m, m) if cfg.noise_m > 0 else ay[k]
        i += m
        cur = k
    dt = np.full(n, cfg.sampling_interval)
    gaps = rng.random(n) < cfg.gap_probability
    dt[gaps] += np.round(rng.uniform(3600, 6 * 3600, gaps.sum()))
    t = GPS_START + np.cumsum(dt) - dt[0]
    return t, xs, ys


def gen_trajectories(cfg: ScenarioConfig) -> pd.DataFrame:
    """GPS fixes (``participant_id, timestamp, lat, lon``) for every GPS participant."""
    shares = dwell_shares(cfg)
    frames = []
    for j, rng in enumerate(_streams(cfg.seed + 1, cfg.n_participants_gps)):
        t, xs, ys = _participant_track(rng, cfg, shares)
        lat, lon = unproject_array(xs, ys, cfg.grid)
        frames.append(pd.DataFrame({
            "participant_id": f"G{j:04d}",
            "timestamp": t,
            "lat": lat.round(7),
            "lon": lon.round(7),
        }))
    return pd.concat(frames, ignore_index=True)


def gen_participants(cfg: ScenarioConfig) -> pd.DataFrame:
    """Sex and age of GPS participants (20-30 years)."""
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed + 2))
    n = cfg.n_participants_gps
    return pd.DataFrame({
        "participant_id": [f"G{j:04d}" for j in range(n)],
        "sex": np.where(rng.random(n) < 0.5, "male", "female"),
        "age": rng.integers(20, 31, n),
    })


# ---------------------------------------------------------------------------
# oracles

@dataclass
class OracleReport:
    name: str
    oracle: list
    pipeline: list
    max_abs: float
    max_rel: float
    passed: bool
    tolerance: float
    skipped: bool = False
    note: str = ""

    def to_dict(self):
        return {k: getattr(self, k) for k in
                ("name", "max_abs", "max_rel", "passed", "tolerance", "skipped", "note")}


def _deviation(oracle, pipeline):
    o = np.asarray(oracle, dtype=float)
    p = np.asarray(pipeline, dtype=float)
    both_nan = np.isnan(o) & np.isnan(p)
    mismatch_nan = np.isnan(o) ^ np.isnan(p)
    if mismatch_nan.any():
        return float("inf"), float("inf")
    o, p = o[~both_nan], p[~both_nan]
    if o.size == 0:
        return 0.0, 0.0
    ab = np.abs(o - p)
    rel = ab / np.maximum(np.abs(o), 1e-300)
    rel = np.where(ab == 0, 0.0, rel)
    return float(ab.max()), float(rel.max())


def brute_force_smooth(easting, northing, values, query_e, query_n, k: KernelParams) -> np.ndarray:
    """Every query point against every contributor; no spatial index."""
    out = np.full((len(query_e), values.shape[1]), np.nan)
    r = k.radius * 1000.0
    s = k.sigma * 1000.0
    for i in range(len(query_e)):
        d = np.hypot(easting - query_e[i], northing - query_n[i])
        w = np.where(d <= r, np.exp(-d ** 2 / (2 * s * s)), 0.0)
        for j in range(values.shape[1]):
            m = (w > 0) & ~np.isnan(values[:, j])
            den = w[m].sum()
            out[i, j] = (w[m] * values[m, j]).sum() / den if den > 0 else np.nan
    return out


def exhaustive_activity_space(weights: np.ndarray, gamma: float) -> tuple[int, float]:
    """Minimal cardinality and best coverage by enumerating all subsets."""
    n = len(weights)
    total = weights.sum()
    target = gamma / 100.0
    for size in range(1, n + 1):
        best = -1.0
        for combo in itertools.combinations(range(n), size):
            cov = weights[list(combo)].sum() / total
            if cov >= target - COVERAGE_EPS:
                best = max(best, cov)
        if best >= 0:
            return size, best
    return n, 1.0


def _check_smoothing(records, surfaces, spec, kernel, n_cells, rng):
    if records is None or len(records) == 0 or not surfaces:
        return OracleReport("kernel_smoothing", [], [], 0.0, 0.0, True, 1e-10, True, "no contributors")
    cells = rng.choice(spec.n_cells, size=min(n_cells, spec.n_cells), replace=False)
    ce, cn = spec.centroids()
    vals = individual_values(records)
    oracle = brute_force_smooth(records["easting"].to_numpy(), records["northing"].to_numpy(), vals,
                                ce[cells], cn[cells], kernel)
    pipe = np.column_stack([surfaces[m].values[cells] for m in METRICS])
    ab, rel = _deviation(oracle, pipe)
    return OracleReport("kernel_smoothing", oracle.ravel().tolist(), pipe.ravel().tolist(), ab, rel,
                        rel < 1e-10, 1e-10)


def _check_activity(dists, gammas=(30, 50, 80, 95, 99), max_cells=12):
    small = [d for d in dists if len(d.weights) <= max_cells]
    if not small:
        # fall back to the heaviest cells of each distribution
        small = []
        for d in dists:
            cells, w = d.ranked()
            top = dict(zip(cells[:max_cells], w[:max_cells] / w[:max_cells].sum()))
            small.append(ActivityDistribution(d.participant_id, top, d.observed_seconds, d.in_area_fraction))
    if not small:
        return OracleReport("activity_space_exhaustive", [], [], 0.0, 0.0, True, 0.0, True, "no distributions")
    oracle, pipe = [], []
    for d in small:
        w = np.array(list(d.weights.values()))
        for g in gammas:
            size, cov = exhaustive_activity_space(w, g)
            sp = activity_space(d, g)
            oracle += [size, cov]
            pipe += [len(sp), sp.covered_fraction]
    ab, rel = _deviation(oracle, pipe)
    return OracleReport("activity_space_exhaustive", oracle, pipe, ab, rel, ab <= 1e-12, 1e-12)


def _check_exposure(dists, surfaces, exposures):
    if exposures is None or len(exposures) == 0:
        return OracleReport("exposure_direct", [], [], 0.0, 0.0, True, 1e-12, True, "no exposures")
    by_id = {d.participant_id: d for d in dists}
    oracle, pipe = [], []
    for row in exposures.itertuples(index=False):
        d = by_id.get(row.participant_id)
        if d is None or not np.isfinite(row.value):
            continue
        s = surfaces[MetricKind(row.metric)]
        sp = activity_space(d, row.gamma)
        num = den = 0.0
        for c in sp.cells:
            v = s.values[c[1] * s.spec.n_cols + c[0]]
            if not np.isnan(v):
                num += d.weights[c] * v
                den += d.weights[c]
        oracle.append(num / den)
        pipe.append(row.value)
    ab, rel = _deviation(oracle, pipe)
    return OracleReport("exposure_direct", oracle, pipe, ab, rel, rel <= 1e-12, 1e-12)


def simulate_glmm_rows(rng, n_subjects=500, gammas=nbglmm.DEFAULT_GAMMAS,
                       beta=(1.0, 0.1, 0.0006, 0.05, -0.03, 0.02), phi=10.0, sigma_b2=0.09,
                       max_grids=800):
    """Counts simulated from the mixed model, with ``#Grids`` rising with gamma."""
    G = len(gammas)
    n = n_subjects
    pid = np.repeat([f"S{i:05d}" for i in range(n)], G)
    gam = np.tile(np.asarray(gammas, dtype=float), n)
    age = np.repeat(rng.integers(20, 31, n).astype(float), G)
    male = np.repeat(rng.integers(0, 2, n), G).astype(float)
    top = rng.uniform(1, max_grids, n)
    frac = np.sort(rng.uniform(0, 1, (n, G)), axis=1).ravel()
    grids = np.round(np.repeat(top, G) * frac)
    z = (age - age.mean()) / age.std()
    b = np.repeat(rng.normal(0, math.sqrt(sigma_b2), n), G)
    eta = (beta[0] + beta[1] * male + beta[2] * grids + beta[3] * z + beta[4] * z ** 2 + beta[5] * z ** 3 + b)
    mu = np.exp(eta)
    y = rng.poisson(rng.gamma(phi, mu / phi)).astype(float)
    return pd.DataFrame({"participant_id": pid, "gamma": gam, "response": y,
                         "male": male, "n_grids": grids, "age": age})


def _check_glmm(seed, n_reps, n_subjects):
    if n_reps <= 0:
        return OracleReport("glmm_calibration", [], [], 0.0, 0.0, True, 0.0, True, "disabled")
    beta = np.array([1.0, 0.1, 0.0006, 0.05, -0.03, 0.02])
    hits = []
    for rng in _streams(seed, n_reps):
        rows = simulate_glmm_rows(rng, n_subjects, beta=beta)
        f = nbglmm.fit(rows)
        hits.append(bool(f.converged and np.all(np.abs(f.beta - beta) <= 3 * f.se)))
    rate = float(np.mean(hits))
    return OracleReport("glmm_calibration", [1.0], [rate], 1.0 - rate, 1.0 - rate, rate >= 0.8, 0.2,
                        note=f"{sum(hits)}/{n_reps} replicates recover all coefficients within 3 SE")


def oracle_suite(outputs: dict, n_cells: int = 200, glmm_reps: int = 10, glmm_subjects: int = 200,
                 seed: int = 0) -> list[OracleReport]:
    """Run the brute-force checks on pipeline outputs.

    ``outputs`` may hold ``records`` (eligible imputed cohort frame),
    ``surfaces`` (metric -> Surface), ``spec``, ``kernel``, ``dists`` and
    ``exposures``; missing pieces produce skipped reports.
    """
    rng = np.random.default_rng(seed)
    spec = outputs.get("spec") or GridSpec()
    kernel = outputs.get("kernel") or KernelParams()
    surfaces = outputs.get("surfaces") or {}
    dists = outputs.get("dists") or []
    reports = [
        _check_smoothing(outputs.get("records"), surfaces, spec, kernel, n_cells, rng),
        _check_activity(dists),
        _check_exposure(dists, surfaces, outputs.get("exposures")) if surfaces and dists else
        OracleReport("exposure_direct", [], [], 0.0, 0.0, True, 1e-12, True, "no exposures"),
        _check_glmm(seed, glmm_reps, glmm_subjects),
    ]
    for r in reports:
        if r.skipped:
            logger.warning("oracle %s skipped: %s", r.name, r.note)
    return reports

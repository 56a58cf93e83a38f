import logging
import math

import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import spearmanr

from pvlexposure.cohort import PersonYearRecord, eligible_for_year, impute_viral_loads
from pvlexposure.grid import CellId, GridSpec, centroid
from pvlexposure.surface import (
    METRICS,
    CtiParams,
    EmptySurfaceError,
    KernelParams,
    KernelSmoother,
    MetricKind,
    PipelineOrderError,
    Surface,
    cti_from_probability,
    cti_individual,
    individual_metric,
    individual_values,
    kernel_weight,
    smooth_surface,
    smooth_surfaces,
    summarize,
    surface_summary,
)
from pvlexposure.synth import ScenarioConfig, brute_force_smooth, gen_cohort

SPEC = GridSpec(n_cols=40, n_rows=40)
K = KernelParams()


def frame(e, n, status, vl):
    return pd.DataFrame({"easting": e, "northing": n, "hiv_status": status, "viral_load": vl})


def random_records(rng, n, spec=SPEC, prevalence=0.3):
    ext = spec.extent
    pos = rng.random(n) < prevalence
    vl = np.where(pos, 10 ** rng.normal(3.2, 0.9, n), np.nan)
    vl[pos & (rng.random(n) < 0.05)] = 0.0
    return frame(rng.uniform(ext[0], ext[2], n), rng.uniform(ext[1], ext[3], n),
                 np.where(pos, "positive", "negative"), vl)


def test_default_kernel_constants():
    assert K.sigma == pytest.approx(1.1646, abs=1e-4)
    assert K.radius == 3.0


def test_kernel_weight_examples():
    assert kernel_weight(0.0) == 1.0
    assert kernel_weight(3001.0) == 0.0
    k = KernelParams(sigma=1.1646)
    assert kernel_weight(3000.0, k) == pytest.approx(math.exp(-9 / (2 * 1.1646**2)), rel=1e-12)
    assert kernel_weight(3000.0, k) == pytest.approx(0.0363, abs=1e-4)


def test_kernel_is_monotone():
    d = np.linspace(0, 4000, 4001)
    w = kernel_weight(d)
    assert np.all(np.diff(w) <= 0)
    assert np.all((w >= 0) & (w <= 1))


def test_cti_examples():
    assert cti_individual(150.0) == pytest.approx((1 - 0.997**100) * 100, rel=1e-12)
    # (1 - 0.997**100) * 100 = 25.95
    assert cti_individual(150.0) == pytest.approx(25.95, abs=0.01)
    v = 10**3.237
    assert cti_individual(v) == pytest.approx(54.1, abs=0.05)
    assert math.log10(cti_individual(v)) == pytest.approx(1.733, abs=0.002)
    assert cti_from_probability(0.0) == 0.0


def test_cti_monotone_and_bounded():
    v = np.logspace(0, 7, 500)
    c = cti_individual(v)
    assert np.all(np.diff(c) > 0)
    assert np.all((c > 0) & (c <= 100))
    # very high loads saturate the per-act probability at 1
    assert cti_individual(1e30) == 100.0


def test_individual_metric_examples():
    neg = PersonYearRecord("n", 2019, "male", 30, "negative")
    assert individual_metric(neg, MetricKind.MVL) is None
    assert individual_metric(neg, MetricKind.PDV) is None
    assert individual_metric(neg, MetricKind.CTI) is None
    assert individual_metric(neg, MetricKind.PDV_P) == 0.0
    assert individual_metric(neg, MetricKind.MVL_P) == 0.0
    assert individual_metric(neg, MetricKind.CTI_P) == 0.0
    pos = PersonYearRecord("p", 2019, "male", 30, "positive", 1551.0)
    assert individual_metric(pos, MetricKind.PDV) == 100.0
    at = PersonYearRecord("p", 2019, "male", 30, "positive", 1550.0)
    assert individual_metric(at, MetricKind.PDV) == 0.0
    zero = PersonYearRecord("z", 2019, "male", 30, "positive", 0.0)
    assert individual_metric(zero, MetricKind.MVL) == 0.0
    with pytest.raises(PipelineOrderError):
        individual_metric(PersonYearRecord("u", 2019, "male", 30, "positive"), MetricKind.MVL)


def test_individual_values_match_scalar_path():
    rng = np.random.default_rng(0)
    df = random_records(rng, 200)
    vals = individual_values(df)
    for i, row in enumerate(df.itertuples(index=False)):
        r = PersonYearRecord("x", 2019, "male", 30, row.hiv_status,
                             None if np.isnan(row.viral_load) else row.viral_load)
        for j, m in enumerate(METRICS):
            expected = individual_metric(r, m)
            if expected is None:
                assert np.isnan(vals[i, j])
            else:
                assert vals[i, j] == pytest.approx(expected, rel=1e-13, abs=1e-13)
    with pytest.raises(PipelineOrderError):
        individual_values(frame([0.0], [0.0], ["positive"], [np.nan]))


def test_single_contributor_at_centroid():
    c = centroid(CellId(5, 5), SPEC)
    s = smooth_surface(frame([c.easting], [c.northing], ["positive"], [1000.0]), "MVL", SPEC)
    assert s.value_at(CellId(5, 5)) == pytest.approx(3.0, abs=1e-15)


def test_two_equidistant_homesteads():
    c = centroid(CellId(10, 10), SPEC)
    df = frame([c.easting - 300, c.easting + 300], [c.northing] * 2, ["positive"] * 2, [1000.0, 5000.0])
    s = smooth_surface(df, MetricKind.PDV, SPEC)
    assert s.value_at(CellId(10, 10)) == pytest.approx(50.0, abs=1e-12)


def test_masking_beyond_radius():
    spec = GridSpec(n_cols=100, n_rows=1)
    c = centroid(CellId(0, 0), spec)
    s = smooth_surface(frame([c.easting], [c.northing], ["positive"], [100.0]), "MVL", spec)
    assert not s.masked[30]
    assert s.masked[31]
    assert s.value_at(CellId(31, 0)) is None


def test_twenty_homesteads_match_double_loop():
    rng = np.random.default_rng(1)
    df = random_records(rng, 20, prevalence=1.0)
    s = smooth_surfaces(df, SPEC)
    e, n = SPEC.centroids()
    q = rng.integers(0, SPEC.n_cells, 50)
    oracle = brute_force_smooth(df["easting"], df["northing"], individual_values(df), e[q], n[q], K)
    for j, m in enumerate(METRICS):
        got = s[m].values[q]
        ok = ~np.isnan(oracle[:, j])
        assert np.array_equal(ok, ~np.isnan(got))
        np.testing.assert_allclose(got[ok], oracle[ok, j], rtol=1e-10)


def test_smoother_estimator_matches_grid_path():
    rng = np.random.default_rng(2)
    df = random_records(rng, 150)
    vals = individual_values(df)
    X = df[["easting", "northing"]].to_numpy()
    est = KernelSmoother().fit(X, vals)
    grid = est.predict_grid(SPEC)
    e, n = SPEC.centroids()
    pts = est.predict(np.column_stack([e, n]))
    np.testing.assert_allclose(grid, pts, rtol=1e-10, equal_nan=True)
    assert est.get_params() == {"sigma": K.sigma, "radius": 3.0}
    one = KernelSmoother(sigma=0.5).fit(X, vals[:, 3])
    assert one.predict(X[:3]).shape == (3,)
    assert np.isfinite(one.score(X, vals[:, 3]))


def test_smoother_validation():
    with pytest.raises(ValueError):
        KernelSmoother().fit(np.zeros((3, 3)), np.zeros(3))
    with pytest.raises(ValueError):
        KernelSmoother(sigma=-1).fit(np.zeros((3, 2)), np.zeros(3))


def test_no_positives_masks_pvl_surfaces(caplog):
    df = frame([500.0, 900.0], [500.0, 900.0], ["negative"] * 2, [np.nan] * 2)
    with caplog.at_level(logging.WARNING):
        s = smooth_surfaces(df, SPEC)
    for m in (MetricKind.MVL, MetricKind.PDV, MetricKind.CTI):
        assert s[m].masked.all()
        with pytest.raises(EmptySurfaceError):
            surface_summary(s[m])
    for m in (MetricKind.MVL_P, MetricKind.PDV_P, MetricKind.CTI_P):
        v = s[m].values[~s[m].masked]
        assert v.size and np.all(v == 0)
    assert "fully masked" in caplog.text


def test_surface_ranges_and_attenuation():
    rng = np.random.default_rng(4)
    df = random_records(rng, 600)
    s = smooth_surfaces(df, SPEC)
    for m in METRICS:
        v = s[m].values[~s[m].masked]
        assert np.all(v >= 0)
        if m.base in ("PDV", "CTI"):
            assert np.all(v <= 100)
    for base in ("MVL", "PDV", "CTI"):
        full, pop = s[MetricKind(base)], s[MetricKind(base + "_P")]
        both = ~full.masked
        assert np.all(pop.values[both] <= full.values[both] + 1e-12)


def test_bounded_convexity():
    rng = np.random.default_rng(5)
    df = random_records(rng, 300)
    vals = individual_values(df)
    s = smooth_surfaces(df, SPEC)
    for j, m in enumerate(METRICS):
        v = s[m].values[~s[m].masked]
        assert np.nanmin(vals[:, j]) <= v.min() and v.max() <= np.nanmax(vals[:, j])


def test_tenfold_scaling_shifts_mvl_by_one():
    rng = np.random.default_rng(6)
    df = random_records(rng, 300, prevalence=1.0)
    df["viral_load"] = np.maximum(df["viral_load"], 1.0)
    a = smooth_surface(df, "MVL", SPEC).values
    b = smooth_surface(df.assign(viral_load=df["viral_load"] * 10), "MVL", SPEC).values
    ok = ~np.isnan(a)
    np.testing.assert_allclose(b[ok] - a[ok], 1.0, atol=1e-12)


def test_pdv_threshold_sensitivity():
    rng = np.random.default_rng(7)
    df = random_records(rng, 50, prevalence=1.0)
    df.loc[0, "viral_load"] = 1000.0
    v0 = individual_values(df)[:, 1]
    up = individual_values(df.assign(viral_load=df["viral_load"].where(df.index != 0, 1600.0)))[:, 1]
    same = individual_values(df.assign(viral_load=df["viral_load"].where(df.index != 0, 1500.0)))[:, 1]
    assert up[0] - v0[0] == 100.0
    assert np.array_equal(np.delete(up, 0), np.delete(v0, 0))
    assert np.array_equal(same, v0)


def test_mvl_cti_rank_correlation():
    # default desk scenario; means of a convex transform may reorder a few cells
    cfg = ScenarioConfig()
    cohort = impute_viral_loads(gen_cohort(cfg), seed=cfg.seed)
    s = smooth_surfaces(eligible_for_year(cohort, 2019, cfg.grid), cfg.grid)
    ok = ~s[MetricKind.MVL].masked & (s[MetricKind.CTI].values > 0)
    rho = spearmanr(s[MetricKind.MVL].values[ok], np.log10(s[MetricKind.CTI].values[ok])).statistic
    assert rho > 0.99


def test_summary_examples():
    s = Surface(MetricKind.PDV, 2019, GridSpec(n_cols=5, n_rows=1), np.array([1.0, 2, 3, 4, 5]))
    out = surface_summary(s)
    assert (out["median"], out["q1"], out["q3"]) == (3.0, 2.0, 4.0)
    const = surface_summary(Surface(MetricKind.PDV, 2019, GridSpec(n_cols=3, n_rows=1), np.full(3, 7.0)))
    assert const["mean"] == const["median"] == 7.0 and const["sd"] == 0.0
    assert list(summarize([1.0])) == ["mean", "sd", "min", "q1", "median", "q3", "max"]


def test_summary_log_scales():
    spec = GridSpec(n_cols=3, n_rows=1)
    cti = Surface(MetricKind.CTI, None, spec, np.array([10.0, 100.0, np.nan]))
    assert surface_summary(cti)["mean"] == pytest.approx(1.5)
    mvl = Surface(MetricKind.MVL, None, spec, np.array([2.0, 4.0, np.nan]))
    assert surface_summary(mvl)["mean"] == 3.0
    with pytest.raises(EmptySurfaceError):
        surface_summary(Surface(MetricKind.MVL, None, spec, np.full(3, np.nan)))


def test_summary_matches_reference_quantiles():
    rng = np.random.default_rng(9)
    df = random_records(rng, 400)
    s = smooth_surfaces(df, SPEC)[MetricKind.PDV_P]
    v = s.values[~s.masked]
    out = surface_summary(s)
    v_sorted = np.sort(v)

    def q(p):
        h = (len(v_sorted) - 1) * p
        lo = int(math.floor(h))
        return v_sorted[lo] + (h - lo) * (v_sorted[min(lo + 1, len(v_sorted) - 1)] - v_sorted[lo])

    assert out["q1"] == pytest.approx(q(0.25), rel=1e-12)
    assert out["median"] == pytest.approx(q(0.5), rel=1e-12)
    assert out["q3"] == pytest.approx(q(0.75), rel=1e-12)
    assert out["sd"] == pytest.approx(np.std(v, ddof=1), rel=1e-12)


def test_smoothing_is_chunk_invariant():
    from pvlexposure.surface import smooth_grid
    rng = np.random.default_rng(10)
    df = random_records(rng, 500)
    vals = individual_values(df)
    a = smooth_grid(df["easting"], df["northing"], vals, SPEC, K, chunk=7)
    b = smooth_grid(df["easting"], df["northing"], vals, SPEC, K, chunk=1000)
    np.testing.assert_allclose(a[0], b[0], rtol=1e-12)
    np.testing.assert_allclose(a[1], b[1], rtol=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.floats(0, 4000), st.floats(0, 4000), st.floats(0, 6)), min_size=1, max_size=15),
       st.integers(0, SPEC.n_cells - 1))
def test_weighted_mean_property(points, cell):
    e, n, lv = map(np.array, zip(*points))
    df = frame(e, n, ["positive"] * len(e), 10**lv)
    s = smooth_surface(df, "MVL", SPEC)
    oracle = brute_force_smooth(e, n, np.log10(10**lv)[:, None], *[a[[cell]] for a in SPEC.centroids()], K)[0, 0]
    got = s.values[cell]
    if np.isnan(oracle):
        assert np.isnan(got)
    else:
        assert got == pytest.approx(oracle, rel=1e-10, abs=1e-12)
        assert lv.min() - 1e-12 <= got <= lv.max() + 1e-12

import logging

import numpy as np
import pytest

from pvlexposure.activity import ingest_all
from pvlexposure.cohort import eligible_for_year, impute_viral_loads
from pvlexposure.exposure import exposure_matrix
from pvlexposure.grid import GridSpec
from pvlexposure.surface import KernelParams, MetricKind, Surface, individual_values, smooth_surfaces
from pvlexposure.synth import (
    ScenarioConfig,
    brute_force_smooth,
    exhaustive_activity_space,
    gen_cohort,
    gen_participants,
    gen_trajectories,
    oracle_suite,
)

SPEC = GridSpec(n_cols=60, n_rows=60)


def small(**kw):
    base = dict(n_persons=600, n_participants_gps=8, fixes_per_participant=800, n_clusters=3,
                anchor_range_m=1500, grid=SPEC)
    base.update(kw)
    return ScenarioConfig(**base)


@pytest.fixture(scope="module")
def scenario():
    cfg = small()
    cohort = impute_viral_loads(gen_cohort(cfg), seed=cfg.seed)
    recs = eligible_for_year(cohort, 2019, SPEC)
    surfaces = smooth_surfaces(recs, SPEC, year=2019)
    dists, _ = ingest_all(gen_trajectories(cfg), SPEC)
    exposures = exposure_matrix(dists, surfaces, [50, 95, 100])
    return {"records": recs, "surfaces": surfaces, "spec": SPEC, "dists": dists, "exposures": exposures}


def test_config_validation():
    with pytest.raises(ValueError):
        ScenarioConfig(hiv_prevalence=1.5)
    with pytest.raises(ValueError):
        ScenarioConfig(n_persons=0)
    with pytest.raises(ValueError):
        ScenarioConfig(homestead_layout="ring")
    with pytest.raises(ValueError):
        ScenarioConfig(anchors=2, dwell_shares=(1.0,))


def test_cohort_shape_and_determinism():
    cfg = small(years=(2019, 2020))
    a = gen_cohort(cfg)
    assert len(a) == 2 * cfg.n_persons
    assert a.to_csv() == gen_cohort(cfg).to_csv()
    assert a.to_csv() != gen_cohort(small(years=(2019, 2020), seed=1)).to_csv()
    pos = a["hiv_status"] == "positive"
    assert a.loc[~pos, "viral_load"].isna().all()
    assert a.loc[pos, "viral_load"].isna().any()
    assert 0.1 < pos.mean() < 0.3


def test_prevalence_zero_masks_pvl_surfaces():
    cohort = impute_viral_loads(gen_cohort(small(hiv_prevalence=0.0)), seed=0)
    assert (cohort["hiv_status"] == "negative").all()
    s = smooth_surfaces(eligible_for_year(cohort, 2019, SPEC), SPEC)
    assert s[MetricKind.MVL].masked.all()
    assert np.all(s[MetricKind.PDV_P].values[~s[MetricKind.PDV_P].masked] == 0)


def test_point_mass_gives_constant_mvl():
    cfg = small(hiv_prevalence=1.0, vl_log10_mean=3.0, vl_log10_sd=0.0, cluster_vl_sd=0.0)
    cohort = impute_viral_loads(gen_cohort(cfg), seed=0)
    s = smooth_surfaces(eligible_for_year(cohort, 2019, SPEC), SPEC)[MetricKind.MVL]
    assert np.all(s.values[~s.masked] == 3.0)


def test_default_scale_mvl_p_against_oracle():
    cfg = ScenarioConfig(n_persons=5000, grid=GridSpec(n_cols=120, n_rows=120))
    cohort = impute_viral_loads(gen_cohort(cfg), seed=cfg.seed)
    recs = eligible_for_year(cohort, 2019, cfg.grid)
    s = smooth_surfaces(recs, cfg.grid)[MetricKind.MVL_P]
    v = s.values[~s.masked]
    assert 0.3 < np.median(v) < 1.2
    rng = np.random.default_rng(0)
    q = rng.choice(np.flatnonzero(~s.masked), 40, replace=False)
    e, n = cfg.grid.centroids()
    oracle = brute_force_smooth(recs["easting"].to_numpy(), recs["northing"].to_numpy(),
                                individual_values(recs)[:, [3]], e[q], n[q], KernelParams())
    np.testing.assert_allclose(s.values[q], oracle[:, 0], rtol=1e-10)


def test_one_anchor_without_noise_is_one_cell():
    cfg = small(anchors=1, noise_m=0.0, n_participants_gps=3)
    dists, failures = ingest_all(gen_trajectories(cfg), SPEC)
    assert not failures
    for d in dists:
        assert len(d.weights) == 1 and list(d.weights.values()) == [1.0]


def two_anchor_errors(n_fixes):
    cfg = small(anchors=2, dwell_shares=(3, 1), noise_m=0.0, travel=False, gap_probability=0.0,
                fixes_per_participant=n_fixes, n_participants_gps=20, anchor_range_m=3000,
                grid=GridSpec(n_cols=100, n_rows=100), seed=5)
    dists, _ = ingest_all(gen_trajectories(cfg), cfg.grid)
    assert all(len(d.weights) == 2 for d in dists)
    return np.array([max(d.weights.values()) - 0.75 for d in dists])


def test_dwell_shares_are_recovered():
    coarse = two_anchor_errors(2000)
    fine = two_anchor_errors(32000)
    rms_fine = np.sqrt(np.mean(fine ** 2))
    rms_coarse = np.sqrt(np.mean(coarse ** 2))
    assert abs(fine.mean()) < 0.02
    assert rms_fine < 0.02
    # 16x the fixes should shrink the error about 4x
    assert 2.0 < rms_coarse / rms_fine < 8.0


def test_trajectories_deterministic():
    cfg = small()
    a = gen_trajectories(cfg)
    assert a.to_csv() == gen_trajectories(cfg).to_csv()
    assert len(a) == cfg.n_participants_gps * cfg.fixes_per_participant
    assert a.groupby("participant_id")["timestamp"].apply(lambda t: t.is_monotonic_increasing).all()
    p = gen_participants(cfg)
    assert len(p) == cfg.n_participants_gps and p["age"].between(20, 30).all()


def test_exhaustive_search_helper():
    assert exhaustive_activity_space(np.array([0.6, 0.3, 0.1]), 95) == (3, pytest.approx(1.0))
    assert exhaustive_activity_space(np.array([0.6, 0.3, 0.1]), 50) == (1, pytest.approx(0.6))


def test_oracle_suite_passes_on_fresh_scenario(scenario):
    reports = oracle_suite(scenario, glmm_reps=1, glmm_subjects=100)
    assert [r.name for r in reports] == ["kernel_smoothing", "activity_space_exhaustive",
                                         "exposure_direct", "glmm_calibration"]
    assert all(r.passed and not r.skipped for r in reports)
    assert all(set(r.to_dict()) >= {"name", "passed", "max_rel", "tolerance"} for r in reports)


def test_perturbed_surface_fails_smoothing(scenario):
    surfaces = dict(scenario["surfaces"])
    m = MetricKind.MVL_P
    surfaces[m] = Surface(m, 2019, SPEC, surfaces[m].values + 1e-3)
    reports = oracle_suite({**scenario, "surfaces": surfaces, "exposures": None}, glmm_reps=0)
    assert not reports[0].passed


def test_empty_scenario_is_skipped(caplog):
    with caplog.at_level(logging.WARNING, logger="pvlexposure.synth"):
        reports = oracle_suite({}, glmm_reps=0)
    assert all(r.skipped and r.passed for r in reports)
    assert "skipped" in caplog.text

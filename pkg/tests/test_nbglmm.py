import math

import numpy as np
import pandas as pd
import pytest
from scipy import special, stats

from pvlexposure import nbglmm
from pvlexposure.nbglmm import (
    COLUMNS,
    DegenerateModelError,
    NegativeBinomialMixedModel,
    build_design,
    fit_design,
    fit_nb_fixed,
    lrt,
    marginal_loglik,
    nb_logpdf,
    predict_log_mu,
    report,
)
from pvlexposure.synth import simulate_glmm_rows

BETA = np.array([1.0, 0.1, 0.0006, 0.05, -0.03, 0.02])


@pytest.fixture(scope="module")
def sim():
    rows = simulate_glmm_rows(np.random.default_rng(11), n_subjects=300)
    design = build_design(rows)
    return rows, design, fit_design(design)


def rows_for(n_subj, n_gamma, age=None):
    rng = np.random.default_rng(0)
    return pd.DataFrame({
        "participant_id": np.repeat([f"s{i}" for i in range(n_subj)], n_gamma),
        "gamma": np.tile(np.arange(50, 50 + 5 * n_gamma, 5), n_subj),
        "response": rng.poisson(5, n_subj * n_gamma).astype(float),
        "male": np.repeat(rng.integers(0, 2, n_subj), n_gamma).astype(float),
        "n_grids": rng.integers(1, 50, n_subj * n_gamma).astype(float),
        "age": np.repeat(rng.integers(18, 40, n_subj) if age is None else np.full(n_subj, age), n_gamma),
    })


def test_nb_logpdf_matches_scipy_on_integers():
    y = np.arange(0, 40, dtype=float)
    for mu, phi in [(3.0, 0.5), (12.0, 10.0), (0.2, 200.0)]:
        ref = stats.nbinom.logpmf(y, phi, phi / (phi + mu))
        np.testing.assert_allclose(nb_logpdf(y, mu, phi), ref, rtol=1e-10, atol=1e-12)


def test_nb_logpdf_continuous_extension():
    y, mu, phi = 2.5, 4.0, 3.0
    direct = (special.gammaln(y + phi) - special.gammaln(phi) - special.gammaln(y + 1)
              + y * math.log(mu / (mu + phi)) + phi * math.log(phi / (mu + phi)))
    assert nb_logpdf(y, mu, phi) == pytest.approx(direct, rel=1e-12)


def test_design_examples():
    d = build_design(rows_for(3, 2), min_subjects=3)
    assert d.X.shape == (6, 6)
    assert d.groups.tolist() == [0, 0, 1, 1, 2, 2]
    assert abs(d.X[:, 3].mean()) < 1e-12
    assert d.X[:, 3].std() == pytest.approx(1.0)
    assert d.columns == COLUMNS
    flat = build_design(rows_for(12, 2, age=30))
    assert "constant_age" in flat.flags
    assert np.all(flat.X[:, 3:] == 0)


def test_design_errors_and_warnings():
    r = rows_for(12, 2)
    with pytest.raises(DegenerateModelError):
        build_design(r.assign(response=4.0))
    with pytest.raises(ValueError):
        build_design(r.assign(response=-1.0))
    with pytest.raises(ValueError, match="participants"):
        build_design(rows_for(5, 2))
    with pytest.warns(UserWarning, match="weakly identified"):
        d = build_design(rows_for(12, 1))
    assert "single_gamma" in d.flags
    with pytest.raises(ValueError, match="missing"):
        build_design(r.drop(columns="age"))


def test_recovery_within_three_se(sim):
    _, _, f = sim
    assert f.converged
    assert np.all(f.se > 0)
    assert np.all(np.abs(f.beta - BETA) <= 3 * f.se)
    assert f.phi > 0 and f.sigma_b2 >= 0
    assert f.coef("#Grids") > 0


def test_gradient_matches_finite_differences(sim):
    _, design, f = sim
    rng = np.random.default_rng(5)
    theta0 = np.r_[f.beta, math.log(f.phi), 0.5 * math.log(f.sigma_b2)]
    # step sizes follow the column scale so each direction moves the predictor comparably
    col = np.r_[np.abs(design.X).max(axis=0), 1.0, 1.0]
    for _ in range(3):
        theta = theta0 + rng.normal(0, 0.05, theta0.size) / col
        _, g = marginal_loglik(theta, design, grad=True)
        num = np.empty_like(g)
        for j in range(theta.size):
            h = 1e-5 / col[j]
            tp, tm = theta.copy(), theta.copy()
            tp[j] += h
            tm[j] -= h
            num[j] = (marginal_loglik(tp, design) - marginal_loglik(tm, design)) / (2 * h)
        rel = np.abs(g - num) / np.maximum(np.abs(num), 1.0)
        assert rel.max() < 1e-5


def test_quadrature_stability(sim):
    _, design, f = sim
    theta = np.r_[f.beta, math.log(f.phi), 0.5 * math.log(f.sigma_b2)]
    assert abs(marginal_loglik(theta, design, 15) - marginal_loglik(theta, design, 25)) < 1e-6


def test_likelihood_monotone_over_iterations():
    design = build_design(simulate_glmm_rows(np.random.default_rng(3), n_subjects=100))
    trace = []
    fit_design(design, trace=trace)
    assert len(trace) > 3
    assert np.all(np.diff(trace) >= -1e-9)


def test_zero_variance_reduces_to_fixed_effects():
    rows = simulate_glmm_rows(np.random.default_rng(4), n_subjects=300, sigma_b2=0.0)
    design = build_design(rows)
    f = fit_design(design)
    assert f.sigma_b2 < 0.01
    beta_fe, phi_fe, _, ok = fit_nb_fixed(design.X, design.y)
    assert ok
    np.testing.assert_allclose(f.beta, beta_fe, atol=1e-3)


def test_lrt_blocks_and_nesting(sim):
    rows, design, f = sim
    results = {b: lrt(f, rows, b, design=design) for b in nbglmm.BLOCKS}
    assert results["Age"].df == 3 and results["Male"].df == 1 and results["#Grids"].df == 1
    for r in results.values():
        assert r.deviance >= 0
        assert r.loglik_full >= r.loglik_reduced - 1e-6
        assert r.p_value == pytest.approx(stats.chi2.sf(r.deviance, r.df))
    assert results["#Grids"].p_value < 0.001
    with pytest.raises(ValueError):
        lrt(f, rows, "Intercept", design=design)


def test_lrt_on_identically_zero_column():
    rows = simulate_glmm_rows(np.random.default_rng(6), n_subjects=60).assign(male=0.0)
    design = build_design(rows)
    f = fit_design(design)
    assert "zero_column:Male" in f.flags and f.coef("Male") == 0.0
    r = lrt(f, rows, "Male", design=design)
    assert r.deviance == 0.0 and r.p_value == 1.0


def test_predict_log_mu_examples(sim):
    _, _, f = sim
    ref = {"age": f.age_center, "male": 0, "n_grids": 0}
    assert predict_log_mu(f, ref) == pytest.approx(f.beta[0], abs=1e-14)
    assert predict_log_mu(f, {**ref, "male": 1}) - predict_log_mu(f, ref) == pytest.approx(f.beta[1])
    g = nbglmm.NbGlmmFit(np.array([0.3, 0, 0.000602, 0, 0, 0]), 1.0, 0.0, 0.0, np.ones(6), True, 25.0, 5.0)
    delta = predict_log_mu(g, {**ref, "n_grids": 110.5}) - predict_log_mu(g, ref)
    assert delta == pytest.approx(0.0665, abs=5e-4)


def test_age_reparameterisation_invariance(sim):
    rows, design, f = sim
    d2 = build_design(rows, age_center=20.0, age_scale=3.0)
    f2 = fit_design(d2)
    assert f2.loglik == pytest.approx(f.loglik, abs=1e-6)
    mu1 = [predict_log_mu(f, r) for _, r in rows.iloc[::37].iterrows()]
    mu2 = [predict_log_mu(f2, r) for _, r in rows.iloc[::37].iterrows()]
    np.testing.assert_allclose(mu1, mu2, atol=1e-6)
    dev1 = lrt(f, rows, "Age", design=design).deviance
    dev2 = lrt(f2, rows, "Age", design=d2).deviance
    assert dev1 == pytest.approx(dev2, abs=1e-6)
    assert not np.allclose(f.beta[3:], f2.beta[3:])


def test_report_layout(sim):
    rows, design, f = sim
    rep = report(f, [lrt(f, rows, "Male", design=design)], outcome="E^MVL_P", response_scale=1.0)
    assert [c["term"] for c in rep["coefficients"]] == list(COLUMNS)
    assert set(rep["coefficients"][0]) == {"term", "estimate", "std_error", "lrt_p_value"}
    assert rep["coefficients"][1]["lrt_p_value"] is not None
    assert rep["coefficients"][0]["lrt_p_value"] is None
    assert "mu^2/phi" in rep["family"]


def test_estimator_api():
    rows = simulate_glmm_rows(np.random.default_rng(8), n_subjects=80)
    X = rows[["male", "n_grids", "age"]].to_numpy()
    est = NegativeBinomialMixedModel(quadrature_points=9)
    est.fit(X, rows["response"], groups=rows["participant_id"])
    assert est.coef_.shape == (6,)
    assert est.get_params()["quadrature_points"] == 9
    np.testing.assert_allclose(est.predict(X[:5]), np.exp(est.predict_log_mu(X[:5])))
    assert est.lrt("#Grids").df == 1
    with pytest.raises(ValueError):
        est.fit(X, rows["response"])
    with pytest.raises(ValueError):
        est.fit(X[:, :2], rows["response"], groups=rows["participant_id"])

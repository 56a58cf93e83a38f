"""Negative binomial regression with subject random intercepts.

The marginal likelihood integrates each subject's random intercept out with
adaptive Gauss-Hermite quadrature centred at the conditional mode. The
negative binomial density uses the log-gamma form, so non-integer responses
are admissible, with mean ``mu`` and variance ``mu + mu**2 / phi``.

Parameters are optimised on the unconstrained scale
``theta = (beta, log(phi), log(sigma_b))``. The gradient accounts for the
dependence of each subject's quadrature centre and scale on ``theta``, so it
is the exact derivative of the quadrature approximation.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import pandas as pd
from scipy import optimize, special, stats
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted

logger = logging.getLogger(__name__)

COLUMNS = ("Intercept", "Male", "#Grids", "Age", "Age^2", "Age^3")
BLOCKS = {
    "Age": ("Age", "Age^2", "Age^3"),
    "Male": ("Male",),
    "#Grids": ("#Grids",),
}
ROW_FIELDS = ["participant_id", "gamma", "response", "male", "n_grids", "age"]
DEFAULT_GAMMAS = tuple(range(50, 100, 5))

LOG_PHI_BOUNDS = (-8.0, 12.0)
LOG_SIGMA_BOUNDS = (-9.0, 3.0)


class DegenerateModelError(ValueError):
    pass


@dataclass
class Design:
    X: np.ndarray
    y: np.ndarray
    groups: np.ndarray  # subject code per row, rows sorted by subject
    starts: np.ndarray  # first row of each subject
    subjects: np.ndarray
    columns: tuple
    age_center: float
    age_scale: float
    flags: list = field(default_factory=list)

    @property
    def n_subjects(self) -> int:
        return len(self.starts)


@dataclass
class NbGlmmFit:
    beta: np.ndarray
    phi: float
    sigma_b2: float
    loglik: float
    se: np.ndarray
    converged: bool
    age_center: float
    age_scale: float
    columns: tuple = COLUMNS
    n_iter: int = 0
    message: str = ""
    dropped: tuple = ()
    flags: list = field(default_factory=list)
    n_obs: int = 0
    n_subjects: int = 0

    def coef(self, name: str) -> float:
        return float(self.beta[self.columns.index(name)])


@dataclass
class LrtResult:
    block: str
    deviance: float
    df: int
    p_value: float | None
    loglik_full: float
    loglik_reduced: float
    flag: str = ""


def _as_rows(rows) -> pd.DataFrame:
    df = rows if isinstance(rows, pd.DataFrame) else pd.DataFrame(rows)
    missing = [c for c in ROW_FIELDS if c not in df.columns]
    if missing:
        raise ValueError(f"regression rows missing fields {missing}")
    return df


def build_design(rows, age_center: float | None = None, age_scale: float | None = None,
                 min_subjects: int = 10) -> Design:
    """Design matrix, response and subject index for the mixed model.

    Age is centred and scaled (mean 0, unit variance over rows unless given)
    before forming the polynomial columns. ``#Grids`` enters untransformed.
    """
    df = _as_rows(rows)
    df = df.assign(_pid=df["participant_id"].astype(str)).sort_values(["_pid", "gamma"], kind="stable")
    y = df["response"].to_numpy(dtype=float)
    if np.any(y < 0) or not np.all(np.isfinite(y)):
        raise ValueError("responses must be finite and non-negative")
    if np.ptp(y) == 0:
        raise DegenerateModelError("response is constant")
    subjects, groups = np.unique(df["_pid"].to_numpy(), return_inverse=True)
    if len(subjects) < min_subjects:
        raise ValueError(f"need at least {min_subjects} participants, got {len(subjects)}")
    counts = np.bincount(groups)
    flags = []
    if counts.max() < 2:
        warnings.warn("one row per participant: random-intercept variance is weakly identified")
        flags.append("single_gamma")
    age = df["age"].to_numpy(dtype=float)
    center = float(age.mean()) if age_center is None else float(age_center)
    scale = float(age.std()) if age_scale is None else float(age_scale)
    if scale > 0:
        z = (age - center) / scale
    else:
        z = np.zeros_like(age)
        scale = 1.0
        flags.append("constant_age")
        logger.warning("all ages equal; age columns are identically zero")
    X = np.column_stack([
        np.ones_like(y),
        df["male"].to_numpy(dtype=float),
        df["n_grids"].to_numpy(dtype=float),
        z, z ** 2, z ** 3,
    ])
    starts = np.flatnonzero(np.r_[True, np.diff(groups) != 0])
    return Design(X, y, groups, starts, subjects, COLUMNS, center, scale, flags)


# ---------------------------------------------------------------------------
# negative binomial pieces, as functions of the linear predictor eta

def _exp(eta):
    # guards line searches that wander into absurd regions
    return np.exp(np.clip(eta, -60.0, 60.0))


def nb_logpdf(y, mu, phi):
    """Log-density of the continuous negative binomial extension."""
    return (special.gammaln(y + phi) - special.gammaln(phi) - special.gammaln(y + 1.0)
            + y * np.log(mu) - y * np.log(phi + mu) - phi * np.log1p(mu / phi))


def _nb_derivs(y, mu, phi):
    """First three eta-derivatives of the log-density."""
    r = phi + mu
    a = phi * (y - mu) / r
    c = -phi * (phi + y) * mu / r ** 2
    e = -phi * (phi + y) * mu * (phi - mu) / r ** 3
    return a, c, e


class _Problem:
    """Marginal log-likelihood of one design with optional fixed-at-zero columns."""

    def __init__(self, design: Design, n_quad: int = 15, free: np.ndarray | None = None,
                 col_scale: np.ndarray | None = None):
        self.d = design
        self.n_quad = n_quad
        x, w = np.polynomial.hermite.hermgauss(n_quad)
        self.z = math.sqrt(2.0) * x
        self.logw = np.log(w) + x ** 2
        p = design.X.shape[1]
        self.free = np.ones(p, dtype=bool) if free is None else free
        self.Xf = design.X[:, self.free]
        if col_scale is not None:
            self.Xf = self.Xf / col_scale

    @property
    def n_params(self) -> int:
        return self.Xf.shape[1] + 2

    def full_beta(self, theta):
        beta = np.zeros(self.d.X.shape[1])
        beta[self.free] = theta[:-2]
        return beta

    def _rsum(self, v):
        return np.add.reduceat(v, self.d.starts, axis=0)

    def modes(self, eta0, phi, sigma2, tol=1e-11, max_iter=100):
        """Conditional modes of the random intercepts by damped Newton."""
        d = self.d
        b = np.zeros(d.n_subjects)
        for _ in range(max_iter):
            mu = _exp(eta0 + b[d.groups])
            a, c, _ = _nb_derivs(d.y, mu, phi)
            h1 = self._rsum(a) - b / sigma2
            h2 = self._rsum(c) - 1.0 / sigma2
            step = np.clip(-h1 / h2, -2.0, 2.0)
            b = b + step
            if np.max(np.abs(step)) < tol * (1.0 + np.max(np.abs(b))):
                break
        # one more exact Newton step so h'(b) is at round-off level
        mu = _exp(eta0 + b[d.groups])
        a, c, e = _nb_derivs(d.y, mu, phi)
        h1 = self._rsum(a) - b / sigma2
        h2 = self._rsum(c) - 1.0 / sigma2
        return b - h1 / h2

    def loglik(self, theta, grad=True):
        d = self.d
        beta = theta[:-2]
        phi = math.exp(theta[-2])
        sigma2 = math.exp(2.0 * theta[-1])
        eta0 = self.Xf @ beta
        bhat = self.modes(eta0, phi, sigma2)

        # derivatives at the mode
        mu_h = _exp(eta0 + bhat[d.groups])
        a_h, c_h, e_h = _nb_derivs(d.y, mu_h, phi)
        H = -(self._rsum(c_h) - 1.0 / sigma2)
        s = 1.0 / np.sqrt(H)

        # quadrature nodes per subject
        bk = bhat[:, None] + s[:, None] * self.z[None, :]
        eta = eta0[:, None] + bk[d.groups]
        mu = _exp(eta)
        y = d.y[:, None]
        lp = nb_logpdf(y, mu, phi)
        h = self._rsum(lp) - bk ** 2 / (2.0 * sigma2) - 0.5 * math.log(2.0 * math.pi * sigma2)
        t = self.logw[None, :] + h
        lse = special.logsumexp(t, axis=1)
        ll_i = 0.5 * math.log(2.0) + np.log(s) + lse
        ll = float(ll_i.sum())
        if not grad:
            return ll
        pi = np.exp(t - lse[:, None])

        a, _, _ = _nb_derivs(y, mu, phi)
        hp = self._rsum(a) - bk / sigma2  # h'(b_k)
        P1 = (pi * hp).sum(axis=1)
        P2 = (pi * hp * self.z[None, :]).sum(axis=1)
        h3 = self._rsum(e_h)

        def implicit(dh1, dh2):
            db = dh1 / H  # -(dh1)/h''
            dH = -(dh2 + h3 * db)
            ds = -0.5 * s ** 3 * dH
            return ds / s + db * P1 + ds * P2

        Xf = self.Xf
        g = np.empty(self.n_params)
        # fixed effects
        A = (pi[d.groups] * a).sum(axis=1)
        direct_beta = Xf.T @ A
        dh1_beta = self._rsum(c_h[:, None] * Xf)
        dh2_beta = self._rsum(e_h[:, None] * Xf)
        db = dh1_beta / H[:, None]
        dH = -(dh2_beta + h3[:, None] * db)
        ds = -0.5 * (s ** 3)[:, None] * dH
        g[:-2] = direct_beta + (ds / s[:, None] + db * P1[:, None] + ds * P2[:, None]).sum(axis=0)

        # log phi
        r = phi + mu
        dl_dphi = (special.digamma(y + phi) - special.digamma(phi) - np.log1p(mu / phi) + (mu - y) / r)
        direct_tau = phi * (pi * self._rsum(dl_dphi)).sum()
        rh = phi + mu_h
        dh1_tau = phi * self._rsum((d.y - mu_h) * mu_h / rh ** 2)
        dh2_tau = -phi * self._rsum(mu_h * (2.0 * phi * mu_h + d.y * mu_h - d.y * phi) / rh ** 3)
        g[-2] = direct_tau + implicit(dh1_tau, dh2_tau).sum()

        # log sigma
        direct_lam = (pi * (bk ** 2 / sigma2 - 1.0)).sum()
        g[-1] = direct_lam + implicit(2.0 * bhat / sigma2, np.full_like(bhat, 2.0 / sigma2)).sum()
        return ll, g


def nb_fixed_loglik(theta, X, y, grad=True):
    """Log-likelihood of the fixed-effects model, ``theta = (beta, log phi)``."""
    beta, phi = theta[:-1], math.exp(theta[-1])
    mu = _exp(X @ beta)
    ll = float(nb_logpdf(y, mu, phi).sum())
    if not grad:
        return ll
    a, _, _ = _nb_derivs(y, mu, phi)
    dphi = special.digamma(y + phi) - special.digamma(phi) - np.log1p(mu / phi) + (mu - y) / (phi + mu)
    return ll, np.r_[X.T @ a, phi * dphi.sum()]


def _initial_log_phi(y, mu):
    var = np.mean((y - mu) ** 2)
    excess = var - np.mean(mu)
    m2 = np.mean(mu ** 2)
    phi = m2 / excess if excess > 0 else math.exp(LOG_PHI_BOUNDS[1] - 2)
    return float(np.clip(math.log(phi), LOG_PHI_BOUNDS[0] + 1, LOG_PHI_BOUNDS[1] - 1))


def fit_nb_fixed(X, y, tol=1e-10, max_iter=1000):
    """Fixed-effects negative binomial fit started from a log-scale least-squares fit.

    Returns ``(beta, phi, loglik, converged)``.
    """
    pos = y[y > 0]
    offset = 0.5 * pos.min() if pos.size else 1.0
    beta0, *_ = np.linalg.lstsq(X, np.log(y + offset), rcond=None)
    theta0 = np.r_[beta0, _initial_log_phi(y, np.exp(X @ beta0))]
    bounds = [(None, None)] * X.shape[1] + [LOG_PHI_BOUNDS]
    res = optimize.minimize(lambda t: tuple(-v for v in nb_fixed_loglik(t, X, y)), theta0, jac=True,
                            method="L-BFGS-B", bounds=bounds,
                            options={"maxiter": max_iter, "ftol": tol * 1e-2, "gtol": tol})
    return res.x[:-1], math.exp(res.x[-1]), -float(res.fun), bool(res.success)


def _numeric_hessian(fun_grad, x, step=1e-5):
    n = len(x)
    Hm = np.empty((n, n))
    for j in range(n):
        h = step * max(1.0, abs(x[j]))
        xp, xm = x.copy(), x.copy()
        xp[j] += h
        xm[j] -= h
        Hm[:, j] = (fun_grad(xp) - fun_grad(xm)) / (2.0 * h)
    return 0.5 * (Hm + Hm.T)


def fit_design(design: Design, n_quad: int = 15, max_iter: int = 500, tol: float = 1e-8,
               drop: Sequence[str] = (), trace: list | None = None) -> NbGlmmFit:
    """Maximum marginal likelihood fit of ``design`` with ``drop`` columns held at zero."""
    X = design.X
    unknown = [c for c in drop if c not in design.columns]
    if unknown:
        raise ValueError(f"unknown columns {unknown}")
    free = np.array([c not in drop for c in design.columns]) & np.any(X != 0, axis=0)
    zero_cols = [c for c, f, nz in zip(design.columns, free, np.any(X != 0, axis=0)) if not nz]
    flags = list(design.flags) + [f"zero_column:{c}" for c in zero_cols]
    # optimise on columns scaled to unit max-abs so #Grids (hundreds) and the
    # age polynomial share one step-size regime
    col_scale = np.abs(X[:, free]).max(axis=0)
    prob = _Problem(design, n_quad, free, col_scale)

    beta_fe, phi_fe, _, _ = fit_nb_fixed(prob.Xf, design.y)
    theta0 = np.r_[beta_fe, math.log(phi_fe), math.log(0.1)]
    theta0[-2] = float(np.clip(theta0[-2], *LOG_PHI_BOUNDS))
    bounds = [(None, None)] * prob.Xf.shape[1] + [LOG_PHI_BOUNDS, LOG_SIGMA_BOUNDS]

    def objective(t):
        ll, g = prob.loglik(t)
        return -ll, -g

    def callback(xk):
        if trace is not None:
            trace.append(prob.loglik(xk, grad=False))

    res = optimize.minimize(objective, theta0, jac=True, method="L-BFGS-B", bounds=bounds,
                            callback=callback,
                            options={"maxiter": max_iter, "ftol": 1e-14, "gtol": tol, "maxcor": 20})
    theta = res.x
    ll, g = prob.loglik(theta)
    at_sigma_floor = theta[-1] <= LOG_SIGMA_BOUNDS[0] + 1e-3
    at_phi_cap = theta[-2] >= LOG_PHI_BOUNDS[1] - 1e-3
    interior = np.ones(len(theta), dtype=bool)
    interior[-1] = not at_sigma_floor
    interior[-2] = not at_phi_cap
    grad_ok = np.max(np.abs(g[interior])) < max(1e-3, 1e-6 * abs(ll))
    converged = bool(res.success or grad_ok) and res.nit < max_iter
    if at_phi_cap:
        flags.append("phi_at_upper_bound")

    se_free = np.full(prob.Xf.shape[1], np.nan)
    idx = np.flatnonzero(interior)
    try:
        def sub_grad(v):
            t = theta.copy()
            t[idx] = v
            return prob.loglik(t)[1][idx]

        info = -_numeric_hessian(sub_grad, theta[idx])
        cov = np.linalg.inv(info)
        diag = np.diag(cov)[: prob.Xf.shape[1]]
        se_free = np.where(diag > 0, np.sqrt(np.abs(diag)), np.nan) / col_scale
        if np.any(diag <= 0):
            flags.append("information_not_positive_definite")
    except np.linalg.LinAlgError:
        flags.append("singular_information")

    beta = np.zeros(X.shape[1])
    beta[free] = theta[:-2] / col_scale
    se = np.full(X.shape[1], np.nan)
    se[free] = se_free
    return NbGlmmFit(
        beta=beta,
        phi=math.exp(theta[-2]),
        sigma_b2=0.0 if at_sigma_floor else math.exp(2.0 * theta[-1]),
        loglik=ll,
        se=se,
        converged=converged,
        age_center=design.age_center,
        age_scale=design.age_scale,
        columns=design.columns,
        n_iter=int(res.nit),
        message=str(res.message),
        dropped=tuple(drop),
        flags=flags,
        n_obs=len(design.y),
        n_subjects=design.n_subjects,
    )


def fit(rows, quadrature_points: int = 15, max_iter: int = 500, tol: float = 1e-8,
        drop: Sequence[str] = (), age_center=None, age_scale=None) -> NbGlmmFit:
    """Fit the mixed model to regression rows (see :data:`ROW_FIELDS`)."""
    design = build_design(rows, age_center, age_scale)
    return fit_design(design, quadrature_points, max_iter, tol, drop)


def marginal_loglik(theta, design: Design, n_quad: int = 15, grad: bool = False):
    """Marginal log-likelihood (and gradient) at ``theta = (beta, log phi, log sigma_b)``."""
    return _Problem(design, n_quad).loglik(np.asarray(theta, dtype=float), grad=grad)


def lrt(full: NbGlmmFit, rows, block: str, quadrature_points: int = 15, max_iter: int = 500,
        tol: float = 1e-8, design: Design | None = None) -> LrtResult:
    """Likelihood-ratio test of dropping a covariate block from ``full``."""
    if block not in BLOCKS:
        raise ValueError(f"block must be one of {sorted(BLOCKS)}, got {block!r}")
    if design is None:
        design = build_design(rows, full.age_center, full.age_scale)
    cols = BLOCKS[block]
    reduced = fit_design(design, quadrature_points, max_iter, tol, drop=tuple(full.dropped) + cols)
    df = len(cols)
    if not (full.converged and reduced.converged):
        return LrtResult(block, float("nan"), df, None, full.loglik, reduced.loglik, "non-converged fit")
    dev = 2.0 * (full.loglik - reduced.loglik)
    flag = ""
    if dev < 0:
        if dev < -1e-4:
            flag = f"negative deviance {dev:.3g} clamped"
            logger.warning("%s: %s", block, flag)
        dev = 0.0
    return LrtResult(block, dev, df, float(stats.chi2.sf(dev, df)), full.loglik, reduced.loglik, flag)


def predict_log_mu(fit: NbGlmmFit, row) -> float:
    """Linear predictor at ``b_i = 0`` for a row with ``male``, ``n_grids`` and ``age``."""
    z = (float(row["age"]) - fit.age_center) / fit.age_scale
    x = np.array([1.0, float(row["male"]), float(row["n_grids"]), z, z ** 2, z ** 3])
    return float(x @ fit.beta)


def report(fit: NbGlmmFit, lrts: Sequence[LrtResult], outcome: str = "", response_scale: float = 1.0) -> dict:
    """Structured model report in the coefficient/SE/LRT p-value layout."""
    pvals = {r.block: r.p_value for r in lrts}
    block_of = {c: b for b, cs in BLOCKS.items() for c in cs}
    coefs = []
    for name, b, se in zip(fit.columns, fit.beta, fit.se):
        coefs.append({
            "term": name,
            "estimate": float(b),
            "std_error": None if not np.isfinite(se) else float(se),
            "lrt_p_value": pvals.get(block_of.get(name)),
        })
    return {
        "outcome": outcome,
        "family": "negative binomial (log link), Var = mu + mu^2/phi, log-gamma density",
        "response_scale": response_scale,
        "coefficients": coefs,
        "phi": fit.phi,
        "sigma_b2": fit.sigma_b2,
        "loglik": fit.loglik,
        "converged": fit.converged,
        "n_obs": fit.n_obs,
        "n_subjects": fit.n_subjects,
        "age_center": fit.age_center,
        "age_scale": fit.age_scale,
        "flags": list(fit.flags),
        "lrt": [
            {"block": r.block, "deviance": r.deviance, "df": r.df, "p_value": r.p_value, "flag": r.flag}
            for r in lrts
        ],
    }


class NegativeBinomialMixedModel(RegressorMixin, BaseEstimator):
    """Estimator wrapper around :func:`fit_design`.

    ``X`` has columns ``male, n_grids, age``; ``groups`` gives the subject of
    each row and is required by :meth:`fit`. Predictions are population-level
    (random intercept set to zero).

    Parameters
    ----------
    quadrature_points : int, default=15
    max_iter : int, default=500
    tol : float, default=1e-8
    drop : tuple of str, default=()
        Columns held at zero, e.g. ``("Age", "Age^2", "Age^3")``.
    """

    def __init__(self, quadrature_points=15, max_iter=500, tol=1e-8, drop=()):
        self.quadrature_points = quadrature_points
        self.max_iter = max_iter
        self.tol = tol
        self.drop = drop

    def _rows(self, X, y=None, groups=None):
        X = check_array(X, dtype=float)
        if X.shape[1] != 3:
            raise ValueError(f"X must have 3 columns (male, n_grids, age), got {X.shape[1]}")
        n = X.shape[0]
        return pd.DataFrame({
            "participant_id": np.arange(n) if groups is None else np.asarray(groups),
            "gamma": np.arange(n),
            "response": np.zeros(n) if y is None else np.asarray(y, dtype=float),
            "male": X[:, 0], "n_grids": X[:, 1], "age": X[:, 2],
        })

    def fit(self, X, y, groups=None):
        if groups is None:
            raise ValueError("groups (subject identifiers) are required")
        rows = self._rows(X, y, groups)
        self.design_ = build_design(rows)
        self.fit_ = fit_design(self.design_, self.quadrature_points, self.max_iter, self.tol, tuple(self.drop))
        self.coef_ = self.fit_.beta
        self.n_features_in_ = 3
        return self

    def predict_log_mu(self, X):
        check_is_fitted(self, "fit_")
        rows = self._rows(X)
        return np.array([predict_log_mu(self.fit_, r) for _, r in rows.iterrows()])

    def predict(self, X):
        return np.exp(self.predict_log_mu(X))

    def lrt(self, block):
        check_is_fitted(self, "fit_")
        return lrt(self.fit_, None, block, self.quadrature_points, self.max_iter, self.tol, design=self.design_)

"""Least squares: OLS, 2SLS, absorbed fixed effects and event studies.

All solves go through a column-pivoted QR factorisation.  Standard errors
are cluster-robust sandwich estimates with the finite-sample factor
``G/(G-1) * (n-1)/(n-k)``; without clusters every row is its own cluster,
which reproduces HC1.
"""
from dataclasses import dataclass, field
import warnings

import numpy as np
from scipy import linalg, stats
from sklearn.base import BaseEstimator, RegressorMixin

from .exceptions import CollinearityError, ConvergenceError, ValidationError

RANK_TOL = 1e-10
DEMEAN_TOL = 1e-10
DEMEAN_MAX_SWEEPS = 10_000


@dataclass(frozen=True, eq=False)
class RegressionResult:
    names: tuple
    coef: np.ndarray
    se: np.ndarray
    vcov: np.ndarray
    resid: np.ndarray
    r2: float
    n: int
    n_clusters: int
    df_absorbed: int = 0
    first_stage_f: dict = field(default_factory=dict)

    def __getitem__(self, name):
        return float(self.coef[self.names.index(name)])

    def se_of(self, name):
        return float(self.se[self.names.index(name)])

    def tstat(self, name):
        return self[name] / self.se_of(name)

    def as_dict(self):
        return {n: (float(c), float(s)) for n, c, s in zip(self.names, self.coef, self.se)}


def _names(X, names):
    k = X.shape[1]
    if names is None:
        return tuple(f"x{j}" for j in range(k))
    names = tuple(names)
    if len(names) != k:
        raise ValidationError(f"{len(names)} names for {k} columns")
    return names


def _as_2d(X):
    X = np.asarray(X, dtype=float)
    return X[:, None] if X.ndim == 1 else X


def cluster_codes(clusters, n):
    """Dense 0..G-1 codes; ``None`` makes every row its own cluster."""
    if clusters is None:
        return np.arange(n), n
    clusters = np.asarray(clusters)
    if len(clusters) != n:
        raise ValidationError(f"{len(clusters)} cluster keys for {n} rows")
    if clusters.ndim == 2:
        _, codes = np.unique(clusters, axis=0, return_inverse=True)
    else:
        _, codes = np.unique(clusters, return_inverse=True)
    codes = codes.ravel()
    return codes, int(codes.max()) + 1 if n else 0


def cluster_meat(scores, codes, n_groups):
    """``sum_g s_g s_g'`` for per-row score contributions ``scores``."""
    summed = np.zeros((n_groups, scores.shape[1]))
    np.add.at(summed, codes, scores)
    return summed.T @ summed


def sandwich(bread, scores, clusters=None, n_params=None, small_sample=True):
    """Cluster-robust ``bread @ meat @ bread`` with the finite-sample factor.

    ``bread`` is the inverse Hessian (or ``(X'X)^-1``) and ``scores`` the
    per-row contributions to the estimating equations.
    """
    n = scores.shape[0]
    codes, G = cluster_codes(clusters, n)
    meat = cluster_meat(scores, codes, G)
    v = bread @ meat @ bread
    if small_sample:
        k = scores.shape[1] if n_params is None else n_params
        if G < 2 or n <= k:
            raise ValidationError(f"too few clusters ({G}) or rows ({n}) for {k} parameters")
        v = v * (G / (G - 1.0)) * ((n - 1.0) / (n - k))
    return 0.5 * (v + v.T), G


def _qr_solve(X, y, names):
    """Least-squares coefficients via pivoted QR; raises on rank deficiency."""
    n, k = X.shape
    if n < k:
        raise CollinearityError(f"{n} rows for {k} columns", names)
    Q, R, piv = linalg.qr(X, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    scale = max(diag[0], 1e-300) if k else 1.0
    rank = int(np.sum(diag > RANK_TOL * scale)) if k else 0
    if rank < k:
        dropped = [names[j] for j in sorted(piv[rank:])]
        raise CollinearityError(f"design is rank deficient; dropped columns {dropped}", dropped)
    beta = np.empty(k)
    beta[piv] = linalg.solve_triangular(R, Q.T @ y)
    Rinv = linalg.solve_triangular(R, np.eye(k))
    XtX_inv = np.empty((k, k))
    XtX_inv[np.ix_(piv, piv)] = Rinv @ Rinv.T
    return beta, XtX_inv


def _weights(w, n):
    if w is None:
        return None
    w = np.asarray(w, dtype=float)
    if w.shape != (n,) or np.any(w < 0) or not np.all(np.isfinite(w)):
        raise ValidationError("weights must be a finite non-negative vector with one entry per row")
    return w


def _r2(y, resid, w, centered=True):
    w = np.ones_like(y) if w is None else w
    ybar = np.sum(w * y) / np.sum(w) if centered else 0.0
    sst = np.sum(w * (y - ybar) ** 2)
    return 1.0 - np.sum(w * resid ** 2) / sst if sst > 0 else float("nan")


def ols(y, X, clusters=None, names=None, weights=None, df_absorbed=0, _r2_target=None):
    """Ordinary (or weighted) least squares with cluster-robust errors.

    Parameters
    ----------
    y : array of shape (n,)
    X : array of shape (n, k)
        Include a column of ones for an intercept; none is added.
    clusters : array of shape (n,) or (n, m), optional
        Cluster keys (rows of a 2-d array form a composite key).
    weights : array of shape (n,), optional
        Analytic weights.
    df_absorbed : int
        Degrees of freedom absorbed before the call, e.g. by demeaning.

    Returns
    -------
    RegressionResult
    """
    y = np.asarray(y, dtype=float)
    X = _as_2d(X)
    n, k = X.shape
    if y.shape != (n,):
        raise ValidationError(f"y has shape {y.shape}, X has {n} rows")
    names = _names(X, names)
    w = _weights(weights, n)
    sw = np.ones(n) if w is None else np.sqrt(w)
    beta, bread = _qr_solve(X * sw[:, None], y * sw, names)
    resid = y - X @ beta
    scores = X * (resid * (sw * sw))[:, None]
    vcov, G = sandwich(bread, scores, clusters, n_params=k + df_absorbed)
    target = y if _r2_target is None else _r2_target
    return RegressionResult(names=names, coef=beta, se=np.sqrt(np.diag(vcov)), vcov=vcov,
                            resid=resid, r2=_r2(target, resid, w), n=n, n_clusters=G,
                            df_absorbed=df_absorbed)


def wald_f(result, names):
    """Wald statistic divided by the number of restrictions ``coef[names] = 0``."""
    idx = [result.names.index(nm) for nm in names]
    b = result.coef[idx]
    V = result.vcov[np.ix_(idx, idx)]
    return float(b @ np.linalg.solve(V, b)) / len(idx)


def tsls(y, X_endog, X_exog, Z, clusters=None, endog_names=None, exog_names=None,
         instrument_names=None, weights=None, df_absorbed=0):
    """Two-stage least squares.

    The coefficient vector is ordered ``[endogenous, exogenous]``.  The
    first-stage F on the excluded instruments is reported per endogenous
    regressor, using the same covariance estimator as the second stage; a
    ``RuntimeWarning`` flags F below 10.
    """
    y = np.asarray(y, dtype=float)
    Xe, Xx, Z = _as_2d(X_endog), _as_2d(X_exog), _as_2d(Z)
    n = len(y)
    if not (Xe.shape[0] == Xx.shape[0] == Z.shape[0] == n):
        raise ValidationError("y, X_endog, X_exog and Z must have the same number of rows")
    if Z.shape[1] < Xe.shape[1]:
        raise ValidationError(f"{Z.shape[1]} instruments for {Xe.shape[1]} endogenous regressors")
    en = _names(Xe, endog_names)
    xn = _names(Xx, exog_names) if exog_names is not None else tuple(f"exog{j}" for j in range(Xx.shape[1]))
    zn = _names(Z, instrument_names) if instrument_names is not None else tuple(f"z{j}" for j in range(Z.shape[1]))
    first_X = np.hstack([Z, Xx])
    fitted = np.empty_like(Xe)
    fs_f = {}
    for j in range(Xe.shape[1]):
        fs = ols(Xe[:, j], first_X, clusters, names=zn + xn, weights=weights, df_absorbed=df_absorbed)
        fitted[:, j] = Xe[:, j] - fs.resid
        fs_f[en[j]] = wald_f(fs, zn)
        if fs_f[en[j]] < 10:
            warnings.warn(f"weak instruments: first-stage F for {en[j]} is {fs_f[en[j]]:.2f} < 10",
                          RuntimeWarning, stacklevel=2)
    names = en + xn
    X = np.hstack([Xe, Xx])
    Xhat = np.hstack([fitted, Xx])
    w = _weights(weights, n)
    sw = np.ones(n) if w is None else np.sqrt(w)
    beta, bread = _qr_solve(Xhat * sw[:, None], y * sw, names)
    resid = y - X @ beta
    scores = Xhat * (resid * (sw * sw))[:, None]
    vcov, G = sandwich(bread, scores, clusters, n_params=X.shape[1] + df_absorbed)
    return RegressionResult(names=names, coef=beta, se=np.sqrt(np.diag(vcov)), vcov=vcov,
                            resid=resid, r2=_r2(y, resid, w), n=n, n_clusters=G,
                            df_absorbed=df_absorbed, first_stage_f=fs_f)


# --------------------------------------------------------------------------- #
# absorbed fixed effects
# --------------------------------------------------------------------------- #

def _codes(groups):
    out = []
    for g in groups:
        g = np.asarray(g)
        if g.ndim == 2:
            _, c = np.unique(g, axis=0, return_inverse=True)
        else:
            _, c = np.unique(g, return_inverse=True)
        c = c.ravel()
        out.append((c, int(c.max()) + 1 if len(c) else 0))
    return out


def demean(M, groups, weights=None, tol=DEMEAN_TOL, max_sweeps=DEMEAN_MAX_SWEEPS):
    """Project columns of ``M`` off every fixed-effect family.

    Alternating projections (one weighted group-mean sweep per family) until
    the sup-norm change in a sweep falls below ``tol`` times the scale of the
    data.  Returns ``(residualised M, sweeps used)``.
    """
    M = np.array(_as_2d(M), dtype=float, copy=True)
    n = M.shape[0]
    w = np.ones(n) if weights is None else _weights(weights, n)
    fams = _codes(groups)
    scale = max(1.0, float(np.max(np.abs(M)))) if M.size else 1.0
    trace = []
    for sweep in range(1, max_sweeps + 1):
        change = 0.0
        for codes, G in fams:
            mass = np.bincount(codes, weights=w, minlength=G)
            mass[mass == 0] = 1.0
            for j in range(M.shape[1]):
                means = np.bincount(codes, weights=w * M[:, j], minlength=G) / mass
                step = means[codes]
                M[:, j] -= step
                change = max(change, float(np.max(np.abs(step))) if n else 0.0)
        trace.append(change)
        if len(fams) <= 1 or change < tol * scale:
            return M, sweep
    raise ConvergenceError(f"demeaning did not converge in {max_sweeps} sweeps", trace)


def fe_regress(y, X, fe_groups, clusters=None, names=None, weights=None,
               tol=DEMEAN_TOL, max_sweeps=DEMEAN_MAX_SWEEPS):
    """OLS of ``y`` on ``X`` absorbing one or more fixed-effect families.

    Absorbed degrees of freedom are the number of levels summed over families
    minus ``(families - 1)``; they enter the finite-sample factor.  A
    regressor that is constant within the absorbed groups raises
    ``CollinearityError``.
    """
    y = np.asarray(y, dtype=float)
    X = _as_2d(X)
    names = _names(X, names)
    if not fe_groups:
        return ols(y, X, clusters, names=names, weights=weights)
    M, _ = demean(np.column_stack([y, X]), fe_groups, weights, tol, max_sweeps)
    yt, Xt = M[:, 0], M[:, 1:]
    before = np.sqrt(np.sum(X * X, axis=0))
    after = np.sqrt(np.sum(Xt * Xt, axis=0))
    flat = [nm for nm, a, b in zip(names, after, before) if a <= 1e-8 * max(b, 1e-300)]
    if flat:
        raise CollinearityError(f"regressors collinear with fixed effects: {flat}", flat)
    levels = sum(G for _, G in _codes(fe_groups))
    absorbed = levels - (len(fe_groups) - 1)
    return ols(yt, Xt, clusters, names=names, weights=weights, df_absorbed=absorbed, _r2_target=y)


def dummies(codes, drop_first=True, prefix="fe"):
    """One-hot matrix for integer-coded groups (used by dummy-variable oracles)."""
    levels, inv = np.unique(codes, return_inverse=True)
    D = np.zeros((len(codes), len(levels)))
    D[np.arange(len(codes)), inv.ravel()] = 1.0
    names = [f"{prefix}[{v}]" for v in levels]
    if drop_first:
        return D[:, 1:], names[1:]
    return D, names


# --------------------------------------------------------------------------- #
# event study
# --------------------------------------------------------------------------- #

@dataclass(frozen=True, eq=False)
class EventStudyResult:
    ages: np.ndarray
    coef: np.ndarray
    se: np.ndarray
    ci_low: np.ndarray
    ci_high: np.ndarray
    reference_age: int
    regression: RegressionResult


def did_event_study(outcome, agent, age, year, treated, reference_age=17,
                    ages=range(15, 31), level=0.95):
    """Treated-by-age effects with agent, age and year fixed effects.

    Rows with ages outside ``ages`` are dropped.  The reference age's effect
    is zero by construction.  Errors are clustered by agent.

    Parameters
    ----------
    outcome, agent, age, year : arrays of shape (n,)
        One row per agent-year.
    treated : array of shape (n,)
        0/1 treatment status of the row's agent (constant within agent).
    """
    outcome = np.asarray(outcome, dtype=float)
    agent, age, year = (np.asarray(a) for a in (agent, age, year))
    treated = np.asarray(treated, dtype=float)
    ages = np.asarray(list(ages), dtype=np.int64)
    if reference_age not in ages:
        raise ValidationError(f"reference age {reference_age} outside the event window")
    keep = np.isin(age, ages)
    outcome, agent, age, year, treated = (a[keep] for a in (outcome, agent, age, year, treated))
    est_ages = ages[ages != reference_age]
    X = np.column_stack([treated * (age == a) for a in est_ages])
    names = tuple(f"treated_x_age_{a}" for a in est_ages)
    reg = fe_regress(outcome, X, [agent, age, year], clusters=agent, names=names)
    z = stats.norm.ppf(0.5 + level / 2.0)
    coef = np.zeros(len(ages))
    se = np.zeros(len(ages))
    pos = np.flatnonzero(ages != reference_age)
    coef[pos], se[pos] = reg.coef, reg.se
    return EventStudyResult(ages=ages, coef=coef, se=se, ci_low=coef - z * se, ci_high=coef + z * se,
                            reference_age=int(reference_age), regression=reg)


# --------------------------------------------------------------------------- #
# estimator wrappers
# --------------------------------------------------------------------------- #

class LinearRegression(BaseEstimator, RegressorMixin):
    """OLS with optional absorbed fixed effects and cluster-robust errors.

    ``fit`` takes ``clusters`` and ``groups`` as keyword arguments because
    they are row-aligned data, not hyperparameters.
    """

    def __init__(self, fit_intercept=True):
        self.fit_intercept = fit_intercept

    def _design(self, X):
        X = _as_2d(X)
        if self.fit_intercept and not getattr(self, "absorbed_", False):
            return np.column_stack([np.ones(len(X)), X])
        return X

    def fit(self, X, y, clusters=None, groups=None, sample_weight=None):
        X = _as_2d(X)
        names = [f"x{j}" for j in range(X.shape[1])]
        self.absorbed_ = bool(groups)
        if self.absorbed_:
            self.result_ = fe_regress(y, X, groups, clusters, names=names, weights=sample_weight)
            resid_mean = np.asarray(y, dtype=float) - X @ self.result_.coef
            self.intercept_ = float(np.average(resid_mean, weights=sample_weight))
            self.coef_ = self.result_.coef
        else:
            if self.fit_intercept:
                names = ["intercept"] + names
            self.result_ = ols(y, self._design(X), clusters, names=names, weights=sample_weight)
            self.intercept_ = float(self.result_.coef[0]) if self.fit_intercept else 0.0
            self.coef_ = self.result_.coef[1:] if self.fit_intercept else self.result_.coef
        self.se_ = self.result_.se[1:] if (self.fit_intercept and not self.absorbed_) else self.result_.se
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X):
        return _as_2d(X) @ self.coef_ + self.intercept_


class TwoStageLeastSquares(BaseEstimator, RegressorMixin):
    """2SLS estimator; ``X`` holds the endogenous columns, ``Z`` the instruments."""

    def __init__(self, fit_intercept=True):
        self.fit_intercept = fit_intercept

    def fit(self, X, y, Z, exog=None, clusters=None, sample_weight=None):
        X = _as_2d(X)
        n = len(X)
        ex = np.empty((n, 0)) if exog is None else _as_2d(exog)
        if self.fit_intercept:
            ex = np.column_stack([np.ones(n), ex])
        self.result_ = tsls(y, X, ex, Z, clusters, weights=sample_weight)
        k = X.shape[1]
        self.coef_ = self.result_.coef[:k]
        self.exog_coef_ = self.result_.coef[k:]
        self.se_ = self.result_.se[:k]
        self.first_stage_f_ = self.result_.first_stage_f
        self.n_features_in_ = k
        return self

    def predict(self, X, exog=None):
        X = _as_2d(X)
        n = len(X)
        ex = np.empty((n, 0)) if exog is None else _as_2d(exog)
        if self.fit_intercept:
            ex = np.column_stack([np.ones(n), ex])
        return X @ self.coef_ + ex @ self.exog_coef_

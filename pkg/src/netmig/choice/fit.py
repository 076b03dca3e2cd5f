"""Maximum-likelihood fitting of the conditional logit."""
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg, optimize, sparse
from scipy.sparse.linalg import splu
from sklearn.base import BaseEstimator

from ..exceptions import CollinearityError, EstimationError, SeparationError, ValidationError
from ..linear import cluster_codes
from ..utility import ParameterSet
from .model import LogitProblem, ModelSpec, RDSpec, build_design

DENSE_LIMIT = 2000
DIVERGENCE_BOUND = 1e3
MAX_STEP = 5.0


@dataclass(frozen=True, eq=False)
class FitResult:
    """Estimates of one specification.

    ``coef`` and ``se`` cover every parameter (structural first, then fixed
    effects).  When the model has more than ``DENSE_LIMIT`` parameters only
    the structural block of ``vcov`` is computed and fixed-effect SEs are NaN.
    """

    names: tuple
    coef: np.ndarray
    se: np.ndarray
    vcov: np.ndarray
    loglik: float
    grad_norm: float
    iterations: int
    converged: bool
    trace: list
    n_obs: int
    n_rows: int
    n_clusters: int
    n_structural: int
    spec: ModelSpec
    design: object = field(repr=False, default=None)

    def __getitem__(self, name):
        return float(self.coef[self.names.index(name)])

    def se_of(self, name):
        return float(self.se[self.names.index(name)])

    @property
    def structural(self):
        k = self.n_structural
        return dict(zip(self.names[:k], self.coef[:k]))

    @property
    def fixed_effects(self):
        """FE coefficients by level name, reference levels included at 0."""
        k = self.n_structural
        out = dict(zip(self.names[k:], self.coef[k:]))
        if self.design is not None:
            out.update({r: 0.0 for r in self.design.fe_levels.get("reference", [])})
        return out

    def destination_effects(self, city_ids):
        """Destination FE aligned to ``city_ids`` (NaN where not estimated)."""
        fe = self.fixed_effects
        return np.array([fe.get(f"dest[{int(c)}]", np.nan) for c in city_ids])

    def to_parameter_set(self, base=None):
        """Copy estimated utility coefficients onto a ``ParameterSet``."""
        base = ParameterSet() if base is None else base
        attr = {"log_friends": "network_coef", "same_city": "stay_bonus",
                "log_distance": "log_distance_coef", "log_distance_x_out_of_state": "out_of_state_coef",
                "same_city_x_log_friends": "stay_network_coef",
                "log_distance_x_log_friends": "distance_network_coef",
                "log_distance_x_out_of_state_x_log_friends": "out_of_state_network_coef",
                "log_wage": "wage_coef"}
        kw = {attr[k]: float(v) for k, v in self.structural.items() if k in attr}
        for k in ("same_city_x_log_friends", "log_distance_x_log_friends",
                  "log_distance_x_out_of_state_x_log_friends"):
            if k not in self.structural:
                kw[attr[k]] = 0.0
        return base.replace(**kw)


def _check_rank(H, names):
    """Raise ``CollinearityError`` if the information matrix is singular."""
    M = -H.toarray() if sparse.issparse(H) else -H
    _, R, piv = linalg.qr(M, pivoting=True)
    d = np.abs(np.diag(R))
    if len(d) == 0:
        return
    rank = int(np.sum(d > 1e-10 * d[0]))
    if rank < len(d):
        dropped = [names[j] for j in sorted(piv[rank:])]
        raise CollinearityError(f"logit design is rank deficient; dropped columns {dropped}", dropped)


def _newton_direction(H, g, names):
    if H.shape[0] <= DENSE_LIMIT:
        try:
            c = linalg.cho_factor(-H.toarray())
            return linalg.cho_solve(c, g)
        except linalg.LinAlgError:
            _check_rank(H, names)
            return linalg.lstsq(-H.toarray(), g)[0]
    try:
        return splu((-H).tocsc()).solve(g)
    except RuntimeError:
        raise CollinearityError("logit information matrix is singular", ()) from None


def _newton(problem, names, b0, max_iter, gtol, ftol):
    b = b0.copy()
    ll, g = problem.loglik_and_gradient(b)
    trace = [ll]
    gnorm = float(np.max(np.abs(g))) if len(g) else 0.0
    if problem.n_params and problem.n_params <= DENSE_LIMIT:
        _check_rank(problem.hessian(b), names)
    for it in range(1, max_iter + 1):
        if gnorm < gtol:
            return b, ll, gnorm, it - 1, True, trace
        step = _newton_direction(problem.hessian(b), g, names)
        if not np.all(np.isfinite(step)) or g @ step <= 0:
            step = g / max(1.0, float(np.max(np.abs(g))))
        # far from the optimum the quadratic model can overshoot into
        # saturated probabilities; cap the move per coefficient
        big = float(np.max(np.abs(step)))
        if big > MAX_STEP:
            step *= MAX_STEP / big
        t = 1.0
        for _ in range(60):
            cand = b + t * step
            ll_new = problem.loglik(cand)
            if np.isfinite(ll_new) and ll_new >= ll:
                break
            t *= 0.5
        else:
            # no ascent possible at working precision
            return b, ll, gnorm, it, gnorm < 1e-4, trace
        if np.max(np.abs(cand)) > DIVERGENCE_BOUND:
            k = int(np.argmax(np.abs(cand)))
            raise SeparationError(f"coefficient {names[k]} diverges (perfect prediction)", [names[k]])
        rel = abs(ll_new - ll) / max(1.0, abs(ll))
        b, ll = cand, ll_new
        trace.append(ll)
        g = problem.gradient(b)
        gnorm = float(np.max(np.abs(g)))
        if gnorm < gtol or rel < ftol:
            return b, ll, gnorm, it, True, trace
    return b, ll, gnorm, max_iter, False, trace


def _bfgs(problem, b0, max_iter, gtol, ftol):
    trace = []

    def f(b):
        ll, g = problem.loglik_and_gradient(b)
        trace.append(ll)
        return -ll, -g

    res = optimize.minimize(f, b0, jac=True, method="BFGS",
                            options={"maxiter": max_iter, "gtol": gtol})
    g = problem.gradient(res.x)
    gnorm = float(np.max(np.abs(g))) if len(g) else 0.0
    return res.x, -res.fun, gnorm, int(res.nit), bool(gnorm < max(gtol, 1e-6)), trace


def robust_vcov(problem, b, clusters, n_structural):
    """Cluster-robust sandwich with the ``G/(G-1)`` factor."""
    H = problem.hessian(b)
    S = problem.scores(b)
    codes, G = cluster_codes(clusters, problem.n_obs)
    if G != problem.n_obs:
        agg = sparse.csr_matrix((np.ones(problem.n_obs), (codes, np.arange(problem.n_obs))),
                                shape=(G, problem.n_obs))
        S = agg @ S
    p = problem.n_params
    if p <= DENSE_LIMIT:
        Hinv = np.linalg.inv(-H.toarray())
        B = S @ Hinv
        cols = p
    else:
        lu = splu((-H).tocsc())
        Hinv_s = lu.solve(np.eye(p)[:, :n_structural].copy())
        B = S @ Hinv_s
        cols = n_structural
    B = np.asarray(B)
    V = (B.T @ B) * (G / (G - 1.0)) if G > 1 else np.full((cols, cols), np.nan)
    V = 0.5 * (V + V.T)
    se = np.full(p, np.nan)
    se[:cols] = np.sqrt(np.clip(np.diag(V), 0.0, None))
    return V, se, G


def fit_logit(data, spec=None, world=None, covariates=None, clusters=None, optimizer="newton",
              max_iter=500, gtol=1e-8, ftol=1e-12, raise_on_failure=True):
    """Maximise the conditional-logit likelihood of one specification.

    Parameters
    ----------
    data : ChoiceData
    spec : ModelSpec
    world, covariates : optional
        Needed for wage terms and city-covariate interactions.
    clusters : array, optional
        One key per observation; defaults to (agent, year).
    optimizer : {"newton", "bfgs"}
        Newton with step halving (every accepted step weakly increases the
        likelihood) or BFGS.
    max_iter, gtol, ftol
        Stop when the gradient sup-norm is below ``gtol`` or the relative
        likelihood change is below ``ftol``.

    Returns
    -------
    FitResult
    """
    spec = ModelSpec() if spec is None else spec
    design = build_design(data, spec, world, covariates)
    problem = LogitProblem.from_design(design)
    b0 = np.zeros(problem.n_params)
    if optimizer == "newton":
        b, ll, gnorm, iters, ok, trace = _newton(problem, design.names, b0, max_iter, gtol, ftol)
    elif optimizer == "bfgs":
        b, ll, gnorm, iters, ok, trace = _bfgs(problem, b0, max_iter, gtol, ftol)
    else:
        raise ValidationError(f"unknown optimizer {optimizer!r}")
    if not ok and raise_on_failure:
        raise EstimationError(
            f"likelihood maximisation did not converge after {iters} iterations "
            f"(gradient sup-norm {gnorm:.3e})", trace)
    used = design.data
    if clusters is None:
        clusters = used.cluster_keys()
    V, se, G = robust_vcov(problem, b, clusters, design.n_structural)
    return FitResult(names=design.names, coef=b, se=se, vcov=V, loglik=ll, grad_norm=gnorm,
                     iterations=iters, converged=ok, trace=trace, n_obs=used.n_obs,
                     n_rows=used.n_rows, n_clusters=G, n_structural=design.n_structural,
                     spec=spec, design=design)


class ConditionalLogit(BaseEstimator):
    """Estimator wrapper around ``fit_logit``.

    ``X`` is a ``ChoiceData``; choices are read from it, so ``y`` is ignored.
    World and city covariates are passed to ``fit`` because they are data.
    """

    def __init__(self, fe="destination", network=True, interactions=False, heterogeneity=(),
                 rd_covariate=None, rd_cutoff=0.0, rd_bandwidth=3.3, control_function=False,
                 include_wage=False, wage_offset=None, amenity_offset=None,
                 sampling_correction=True, separation="raise", optimizer="newton", max_iter=500, gtol=1e-8, ftol=1e-12):
        self.fe = fe
        self.network = network
        self.interactions = interactions
        self.heterogeneity = heterogeneity
        self.rd_covariate = rd_covariate
        self.rd_cutoff = rd_cutoff
        self.rd_bandwidth = rd_bandwidth
        self.control_function = control_function
        self.include_wage = include_wage
        self.wage_offset = wage_offset
        self.amenity_offset = amenity_offset
        self.sampling_correction = sampling_correction
        self.separation = separation
        self.optimizer = optimizer
        self.max_iter = max_iter
        self.gtol = gtol
        self.ftol = ftol

    def spec(self):
        rd = None
        if self.rd_covariate is not None:
            rd = RDSpec(self.rd_covariate, self.rd_cutoff, self.rd_bandwidth)
        return ModelSpec(fe=self.fe, network=self.network, interactions=self.interactions,
                         heterogeneity=tuple(self.heterogeneity), rd=rd,
                         control_function=self.control_function, include_wage=self.include_wage,
                         wage_offset=self.wage_offset, amenity_offset=self.amenity_offset,
                         sampling_correction=self.sampling_correction, separation=self.separation)

    def fit(self, X, y=None, world=None, covariates=None, clusters=None):
        self.world_ = world
        self.covariates_ = covariates
        self.result_ = fit_logit(X, self.spec(), world, covariates, clusters, self.optimizer,
                                 self.max_iter, self.gtol, self.ftol)
        k = self.result_.n_structural
        self.feature_names_ = self.result_.names[:k]
        self.coef_ = self.result_.coef[:k]
        self.se_ = self.result_.se[:k]
        self.loglik_ = self.result_.loglik
        return self

    def _problem(self, X):
        design = build_design(X, self.spec(), self.world_, self.covariates_)
        coef = dict(zip(self.result_.names, self.result_.coef))
        b = np.array([coef.get(n, 0.0) for n in design.names])
        return design, LogitProblem.from_design(design), b

    def predict_proba(self, X):
        """Choice probability of every row of the (filtered) design data."""
        _, problem, b = self._problem(X)
        return problem.probabilities(b)

    def predict(self, X):
        """Most likely city id per choice problem."""
        design, problem, b = self._problem(X)
        p = problem.probabilities(b)
        d = design.data
        best = np.empty(d.n_obs, dtype=np.int64)
        for k in range(d.n_obs):
            s = slice(d.offsets[k], d.offsets[k + 1])
            best[k] = d.city_ids[d.city[s][np.argmax(p[s])]]
        return best

    def score(self, X, y=None):
        """Mean log-likelihood per choice problem."""
        _, problem, b = self._problem(X)
        return problem.loglik(b) / problem.n_obs

"""Static spatial equilibrium with agglomeration and congestion.

Given wages ``Y`` and amenities ``xi`` every agent picks the city with the
highest ``wage_coef * log Y + xi + network/distance utility + shock``.  City
labour ``L`` is the head count; wages follow ``Y = A * L**(phi - psi)`` and
amenities ``xi = log(a) - theta * log(L)``.  City scales ``A`` and ``a`` are
calibrated so the observed allocation is an equilibrium.  Shocks are drawn
once and reused across iterations and scenarios.
"""
from dataclasses import dataclass, field, replace
import math

import numpy as np
from scipy.special import logsumexp

from .exceptions import EquilibriumError, ValidationError
from .geo import wage_quartiles
from .simulate import gumbel_draws
from .utility import moving_utility, pair_features

EULER_GAMMA = 0.5772156649015329
SCENARIOS = ("baseline", "zero_variable_distance", "equal_networks", "network_reallocation",
             "double_top_wages", "double_top_wages_and_networks")


@dataclass(frozen=True)
class EquilibriumParams:
    agglomeration: float = 0.10
    price_congestion: float = 0.02
    amenity_congestion: float = 0.02

    def __post_init__(self):
        if not self.agglomeration - self.price_congestion < 1:
            raise ValidationError("unstable parameters: agglomeration - price congestion must be < 1")
        if self.amenity_congestion < 0:
            raise ValidationError("amenity congestion must be >= 0")

    @property
    def wage_elasticity(self):
        return self.agglomeration - self.price_congestion

    @classmethod
    def from_parameter_set(cls, params):
        return cls(params.agglomeration, params.price_congestion, params.amenity_congestion)


@dataclass(frozen=True, eq=False)
class Economy:
    """Everything a scenario changes or the solver reads.

    ``friends`` is a dense ``(n_agents, n_cities)`` count matrix, ``origin``
    the agents' current city positions, ``wage`` and ``amenity`` the
    observed (baseline) values, and ``A``/``a`` the calibrated scales.
    """

    world: object
    params: object
    origin: np.ndarray
    friends: np.ndarray
    shocks: np.ndarray
    wage: np.ndarray
    amenity: np.ndarray
    A: np.ndarray = None
    a: np.ndarray = None
    labor_floor: float = 1.0

    @property
    def n_agents(self):
        return len(self.origin)

    def moving_utility(self):
        same, logd, out = pair_features(self.world)
        o = self.origin
        return moving_utility(self.params, np.log1p(self.friends), same[o], logd[o], out[o])

    def systematic(self, log_wage, amenity, M=None):
        M = self.moving_utility() if M is None else M
        return M + (self.params.wage_coef * log_wage + amenity)[None, :]


def draw_shocks(agent_ids, n_cities, seed, n_jobs=1):
    """i.i.d. standard Gumbel draws per (agent, city), keyed by agent id."""
    return gumbel_draws(seed, "equilibrium", agent_ids, 0, n_cities, n_jobs)


def calibrate_scales(wage, labor, amenity, eq_params, labor_floor=1.0):
    """City scales that make ``(labor, wage, amenity)`` an exact equilibrium.

    ``A = Y / L**(phi - psi)`` and ``a = exp(xi) / L**(-theta)`` with ``L``
    floored at ``labor_floor``.
    """
    L = np.maximum(np.asarray(labor, dtype=float), labor_floor)
    A = np.asarray(wage, dtype=float) / L ** eq_params.wage_elasticity
    a = np.exp(np.asarray(amenity, dtype=float)) / L ** (-eq_params.amenity_congestion)
    return A, a


def choose(economy, log_wage, amenity, M=None):
    V = economy.systematic(log_wage, amenity, M) + economy.shocks
    return np.argmax(V, axis=1)


def make_economy(world, params, origin_ids, friends, seed, agent_ids=None, n_jobs=1, labor_floor=1.0):
    """Assemble a calibrated baseline economy.

    Observed labour is the allocation chosen at observed wages and amenities
    under the fixed shocks; the scales are calibrated to it.
    """
    origin = world.positions(origin_ids)
    n = len(origin)
    agent_ids = np.arange(1, n + 1) if agent_ids is None else np.asarray(agent_ids)
    amen = params.amenity if params.amenity is not None else world.amenity
    shocks = draw_shocks(agent_ids, len(world), seed, n_jobs)
    eco = Economy(world=world, params=params, origin=origin, friends=np.asarray(friends),
                  shocks=shocks, wage=world.wage.copy(), amenity=np.asarray(amen, dtype=float).copy(),
                  labor_floor=labor_floor)
    choice = choose(eco, np.log(eco.wage), eco.amenity)
    L = np.bincount(choice, minlength=len(world)).astype(float)
    A, a = calibrate_scales(eco.wage, L, eco.amenity, EquilibriumParams.from_parameter_set(params),
                            labor_floor)
    return replace(eco, A=A, a=a)


@dataclass(frozen=True, eq=False)
class EquilibriumState:
    labor: np.ndarray
    wage: np.ndarray
    amenity: np.ndarray
    A: np.ndarray
    a: np.ndarray
    choice: np.ndarray
    wage_residual: float
    amenity_residual: float
    iterations: int
    trace: list = field(default_factory=list)
    labor_totals: list = field(default_factory=list)


def _targets(economy, L, eqp):
    Lf = np.maximum(L, economy.labor_floor)
    return (np.log(economy.A) + eqp.wage_elasticity * np.log(Lf),
            np.log(economy.a) - eqp.amenity_congestion * np.log(Lf))


def residuals(economy, state):
    """Sup-norm residuals of the wage and amenity conditions at ``state``.

    The wage residual is relative (``|Y - A L**(phi-psi)| / Y``); the amenity
    residual is absolute.  Labour is recomputed from choices at the state.
    """
    eqp = EquilibriumParams.from_parameter_set(economy.params)
    choice = choose(economy, np.log(state.wage), state.amenity)
    L = np.bincount(choice, minlength=len(economy.world)).astype(float)
    ly, xi = _targets(economy, L, eqp)
    rw = float(np.max(np.abs(state.wage - np.exp(ly)) / state.wage))
    ra = float(np.max(np.abs(state.amenity - xi)))
    return rw, ra, L


def solve_equilibrium(economy, damping=0.5, tol=1e-8, max_iter=10_000, start=None):
    """Damped fixed-point iteration on ``(log Y, xi)``.

    Each sweep computes choices and labour at the current state, the implied
    wages and amenities, and moves a fraction ``damping`` of the way there.
    Once the change is below ``tol`` a final undamped step lands on the
    implied values, and labour is re-checked at that point.
    """
    if economy.A is None or economy.a is None:
        raise ValidationError("economy has no calibrated scales")
    if not 0 < damping <= 1:
        raise ValidationError("damping must lie in (0, 1]")
    eqp = EquilibriumParams.from_parameter_set(economy.params)
    M = economy.moving_utility()
    J = len(economy.world)
    if start is None:
        ly, xi = np.log(economy.wage), economy.amenity.copy()
    else:
        ly, xi = np.log(start.wage), start.amenity.copy()
    trace, totals = [], []
    for it in range(1, max_iter + 1):
        choice = choose(economy, ly, xi, M)
        L = np.bincount(choice, minlength=J).astype(float)
        totals.append(int(L.sum()))
        ty, tx = _targets(economy, L, eqp)
        change = max(float(np.max(np.abs(ty - ly))), float(np.max(np.abs(tx - xi))))
        trace.append(change)
        if change < tol:
            ly, xi = ty, tx
            new_choice = choose(economy, ly, xi, M)
            if np.array_equal(new_choice, choice):
                Y = np.exp(ly)
                state = EquilibriumState(labor=L, wage=Y, amenity=xi, A=economy.A, a=economy.a,
                                         choice=choice, wage_residual=0.0, amenity_residual=0.0,
                                         iterations=it, trace=trace, labor_totals=totals)
                rw, ra, _ = residuals(economy, state)
                return replace(state, wage_residual=rw, amenity_residual=ra)
            continue
        ly = ly + damping * (ty - ly)
        xi = xi + damping * (tx - xi)
    raise EquilibriumError(f"equilibrium not reached in {max_iter} iterations (last change {trace[-1]:.3e})",
                           trace)


# --------------------------------------------------------------------------- #
# scenarios
# --------------------------------------------------------------------------- #

@dataclass(frozen=True)
class Scenario:
    tag: str
    top_share: float = 0.10

    def __post_init__(self):
        if self.tag not in SCENARIOS:
            raise ValidationError(f"unknown scenario {self.tag!r}; choose from {SCENARIOS}")
        if not 0 < self.top_share <= 1:
            raise ValidationError("top_share must lie in (0, 1]")


def top_wage_cities(wage, share):
    """Positions of the ``round(share * J)`` (at least one) highest-wage cities.

    Ties are broken towards the lower position (lower city id).
    """
    J = len(wage)
    k = max(1, int(round(share * J)))
    order = np.lexsort((np.arange(J), -np.asarray(wage)))
    return np.sort(order[:k])


def reallocate_equally(totals, targets, n_cities):
    """Split each row total equally over ``targets`` with largest-remainder
    rounding (remainders go to the lowest positions first)."""
    totals = np.asarray(totals, dtype=np.int64)
    k = len(targets)
    out = np.zeros((len(totals), n_cities), dtype=np.int64)
    base, rem = np.divmod(totals, k)
    out[:, targets] = base[:, None]
    extra = np.arange(k)[None, :] < rem[:, None]
    out[:, targets] += extra
    return out


def apply_counterfactual(scenario, economy):
    """Return a modified copy of ``economy``; the input is untouched."""
    tag = scenario.tag
    p = economy.params
    F = economy.friends
    J = F.shape[1]
    top = top_wage_cities(economy.wage, scenario.top_share)
    if tag == "baseline":
        return economy
    if tag == "zero_variable_distance":
        return replace(economy, params=p.replace(log_distance_coef=0.0, distance_network_coef=0.0))
    if tag == "equal_networks":
        at_origin = F[np.arange(len(F)), economy.origin]
        return replace(economy, friends=np.repeat(at_origin[:, None], J, axis=1))
    if tag == "network_reallocation":
        return replace(economy, friends=reallocate_equally(F.sum(axis=1), top, J))
    A = economy.A.copy()
    A[top] *= 2.0
    if tag == "double_top_wages":
        return replace(economy, A=A)
    F2 = F.copy()
    F2[:, top] *= 2
    return replace(economy, A=A, friends=F2)


# --------------------------------------------------------------------------- #
# outcome reports
# --------------------------------------------------------------------------- #

METRICS = ("network_size", "migration_rate", "distance_from_origin_km", "mean_wage", "sd_wage",
           "amenities_pct_wages", "welfare", "welfare_simulated")


def welfare_terms(economy, state):
    """Per-agent expected maximum utility two ways, in log-wage units.

    Returns ``(logsumexp / beta, (realised max - Euler gamma) / beta)``.
    """
    V = economy.systematic(np.log(state.wage), state.amenity)
    lse = logsumexp(V, axis=1)
    realised = np.max(V + economy.shocks, axis=1) - EULER_GAMMA
    beta = economy.params.wage_coef
    return lse / beta, realised / beta


def _group_metrics(economy, state, rows):
    F = economy.friends[rows]
    o = economy.origin[rows]
    c = state.choice[rows]
    w = state.wage[c]
    lse, sim = welfare_terms(economy, state)
    beta = economy.params.wage_coef
    return {
        "network_size": float(F.sum(axis=1).mean()),
        "migration_rate": float(np.mean(c != o)),
        "distance_from_origin_km": float(economy.world.distances()[o, c].mean()),
        "mean_wage": float(w.mean()),
        "sd_wage": float(w.std()),
        "amenities_pct_wages": float(100.0 * state.amenity[c].mean() / beta),
        "welfare": float(100.0 * lse[rows].mean()),
        "welfare_simulated": float(100.0 * sim[rows].mean()),
    }


def outcome_groups(economy):
    """Agent masks by baseline residence wage quartile."""
    q = wage_quartiles(economy.world.replace(avg_wage=economy.wage))
    oq = q.of(economy.world.ids[economy.origin])
    groups = {"all": np.ones(economy.n_agents, dtype=bool),
              "bottom_quartile": oq == 1, "top_quartile": oq == 4}
    for k in (1, 2, 3, 4):
        groups[f"origin_quartile_{k}"] = oq == k
    return groups


@dataclass(frozen=True, eq=False)
class OutcomeReport:
    """Baseline levels and scenario multiples per group and metric."""

    scenario: str
    rows: list  # (group, metric, baseline, value, multiple)

    def multiple(self, group, metric):
        for g, m, _, _, x in self.rows:
            if g == group and m == metric:
                return x
        raise KeyError((group, metric))

    def level(self, group, metric, which="value"):
        for g, m, b, v, _ in self.rows:
            if g == group and m == metric:
                return b if which == "baseline" else v
        raise KeyError((group, metric))


def outcomes_report(base_economy, base_state, economy, state, scenario="baseline"):
    """Scenario outcomes divided by baseline, with groups fixed ex ante."""
    groups = outcome_groups(base_economy)
    rows = []
    for g, mask in groups.items():
        if not mask.any():
            continue
        b = _group_metrics(base_economy, base_state, mask)
        v = _group_metrics(economy, state, mask)
        for m in METRICS:
            mult = v[m] / b[m] if b[m] != 0 else (1.0 if v[m] == 0 else math.inf)
            rows.append((g, m, b[m], v[m], mult))
    return OutcomeReport(scenario=scenario, rows=rows)


def run_scenarios(economy, scenarios=SCENARIOS, damping=0.5, tol=1e-8, max_iter=10_000, top_share=0.10):
    """Solve the baseline and each scenario; returns ``{tag: (economy, state, report)}``."""
    base = solve_equilibrium(economy, damping, tol, max_iter)
    out = {}
    for tag in scenarios:
        eco = apply_counterfactual(Scenario(tag, top_share), economy)
        st = base if tag == "baseline" else solve_equilibrium(eco, damping, tol, max_iter, start=base)
        out[tag] = (eco, st, outcomes_report(economy, base, eco, st, tag))
    return out

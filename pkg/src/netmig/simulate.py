"""Synthetic worlds and forward simulation of the migration choice model.

Everything here is a test harness: a data-generating process with known
parameters against which the estimators are checked.  All randomness comes
from one master seed split into counter-based streams keyed by
``(purpose, entity ids)``, so results do not depend on how many agents are
simulated alongside a given agent, nor on the number of worker threads.
"""
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, fields
import math

import numpy as np
from scipy import stats

from ._rng import stream
from .data_io import (AgentPanel, CityCovariates, IndustryPanel, NetworkPanel,
                      SurveyChoices, WeatherPanel)
from .exceptions import ValidationError
from .geo import City, World
from .utility import ParameterSet, moving_utility, pair_features


@dataclass(frozen=True)
class DgpConfig:
    """Knobs of the synthetic data-generating process.

    ``amenity_wage_corr`` is the correlation between amenities and the part of
    log wages not driven by the shift-share component (with
    ``bartik_share=0`` this is the plain amenity/log-wage correlation).
    ``network_taste_corr`` couples where friends live to each agent's
    persistent idiosyncratic taste for moving to each city (it does not
    apply to the city the agent currently lives in); with ``taste_sd > 0`` and a
    positive coupling, networks are endogenous in the choice model.
    """

    n_cities: int = 40
    n_states: int = 8
    n_districts: int = None
    n_agents: int = 5000
    n_years: int = 4
    start_year: int = 2014
    lat_range: tuple = (18.0, 30.0)
    lon_range: tuple = (72.0, 88.0)
    # wages, amenities, populations
    wage_log_mean: float = 9.04
    wage_log_sd: float = 0.43
    bartik_share: float = 0.5
    amenity_mean: float = 3.2
    amenity_sd: float = 2.0
    amenity_wage_corr: float = 0.0
    population_log_mean: float = 11.5
    population_log_sd: float = 1.0
    # industries
    n_industries: int = 13
    industry_base_year: int = 1999
    industry_end_year: int = 2016
    # initial networks
    friends_mean: float = 80.0
    friends_log_sd: float = 0.5
    origin_share: float = 0.8
    kernel_decay: float = 1.5
    taste_sd: float = 0.0
    network_taste_corr: float = 0.0
    network_taste_loading: float = 2.0
    # network dynamics
    accrual_rate: float = 0.02
    friend_flight: float = 0.0
    flight_decay: float = 2.0
    # weather
    drought_prob: float = 0.15
    heat_prob: float = 0.15
    weather_history_years: int = 30
    weather_penalty: float = 0.0
    push_shocks: str = "both"
    seed: int = 0

    def __post_init__(self):
        if self.n_cities < 4:
            raise ValidationError("n_cities must be >= 4")
        if self.n_years < 3:
            raise ValidationError("n_years must be >= 3 so that t-2 instruments exist")
        if self.n_agents < 1:
            raise ValidationError("n_agents must be >= 1")
        if self.n_states < 1:
            raise ValidationError("n_states must be >= 1")
        for name in ("drought_prob", "heat_prob", "origin_share", "network_taste_corr",
                     "bartik_share", "friend_flight"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValidationError(f"{name} must lie in [0, 1], got {v}")
        if not -1.0 <= self.amenity_wage_corr <= 1.0:
            raise ValidationError("amenity_wage_corr must lie in [-1, 1]")
        if self.push_shocks not in ("drought", "heat", "both", "none"):
            raise ValidationError(f"push_shocks must be drought, heat, both or none")
        if self.weather_history_years + self.n_years < 10:
            raise ValidationError("weather window must span at least 10 years")

    @property
    def districts(self):
        return self.n_cities if self.n_districts is None else self.n_districts

    @property
    def years(self):
        return np.arange(self.start_year, self.start_year + self.n_years, dtype=np.int64)

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValidationError(f"unknown DgpConfig keys: {sorted(unknown)}")
        kw = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        return cls(**kw)

    def to_dict(self):
        return asdict(self)


# --------------------------------------------------------------------------- #
# world
# --------------------------------------------------------------------------- #

def _partition(order, n_groups):
    """Split an ordering into ``n_groups`` contiguous, near-equal chunks."""
    labels = np.empty(len(order), dtype=np.int64)
    for g, chunk in enumerate(np.array_split(order, n_groups)):
        labels[chunk] = g
    return labels


def _industry_draws(config, district_ids):
    rng = stream(config.seed, "industries")
    n_d, n_k = len(district_ids), config.n_industries
    shares = rng.dirichlet(np.full(n_k, 0.6), size=n_d)
    size = np.exp(rng.normal(9.0, 0.8, size=n_d))
    emp_base = np.round(shares * size[:, None])
    ind_wage = np.exp(rng.normal(8.5, 0.4, size=n_k))
    wage_base = ind_wage[None, :] * np.exp(rng.normal(0.0, 0.25, size=(n_d, n_k)))
    d_wage = rng.normal(0.0, 0.5, size=n_k) * ind_wage
    d_emp = rng.normal(0.0, 0.4, size=n_k) * emp_base.mean(axis=0)
    emp_end = np.maximum(np.round(emp_base + d_emp[None, :] * rng.uniform(0.5, 1.5, size=(n_d, n_k))), 0.0)
    wage_end = np.maximum(wage_base + d_wage[None, :] + rng.normal(0.0, 0.05, size=(n_d, n_k)) * ind_wage, 1.0)
    emp = np.stack([emp_base, emp_end], axis=2)
    wage = np.stack([wage_base, wage_end], axis=2)
    return IndustryPanel(np.asarray(district_ids, dtype=np.int64),
                         tuple(f"ind{k:02d}" for k in range(n_k)),
                         np.array([config.industry_base_year, config.industry_end_year], dtype=np.int64),
                         emp, wage)


def _standardize(x):
    sd = x.std()
    return (x - x.mean()) / sd if sd > 0 else np.zeros_like(x)


def generate_world(config):
    """Draw city locations, administrative nesting, wages, amenities, populations."""
    from .instruments import bartik

    n = config.n_cities
    if config.n_states > n:
        raise ValidationError(f"cannot partition {n} cities into {config.n_states} states")
    n_d = config.districts
    if not config.n_states <= n_d <= n:
        raise ValidationError(f"n_districts must lie in [n_states, n_cities], got {n_d}")
    rng = stream(config.seed, "world")
    lat = rng.uniform(*config.lat_range, size=n)
    lon = rng.uniform(*config.lon_range, size=n)
    # contiguous states: slice the map west to east
    order = np.lexsort((lat, lon))
    state = _partition(order, config.n_states)
    district = np.empty(n, dtype=np.int64)
    next_id = 0
    per_state = np.array_split(np.arange(n_d), config.n_states)
    for s in range(config.n_states):
        members = order[state[order] == s]
        members = members[np.argsort(lat[members], kind="stable")]
        k = len(per_state[s])
        district[members] = _partition(np.arange(len(members)), k)[np.argsort(np.arange(len(members)))] + next_id
        next_id += k
    district_ids = np.arange(n_d, dtype=np.int64) + 1

    industries = _industry_draws(config, district_ids)
    bv = bartik(industries)
    shift_share = _standardize(_standardize(bv.wage) + _standardize(bv.labor))
    idio = rng.normal(size=n)
    b = math.sqrt(config.bartik_share)
    log_wage = config.wage_log_mean + config.wage_log_sd * (
        b * shift_share[district] + math.sqrt(1.0 - config.bartik_share) * idio)
    # amenities are uniform on mean +/- sqrt(3) sd, coupled to the
    # idiosyncratic wage component through a Gaussian copula
    rho = config.amenity_wage_corr
    z = rho * idio + math.sqrt(1.0 - rho * rho) * rng.normal(size=n)
    half = math.sqrt(3.0) * config.amenity_sd
    amenity = config.amenity_mean - half + 2.0 * half * stats.norm.cdf(z)
    pop = np.round(np.exp(rng.normal(config.population_log_mean, config.population_log_sd, size=n)))
    cities = [City(city_id=k + 1, name=f"city_{k + 1}", lat=float(lat[k]), lon=float(lon[k]),
                   state_id=int(state[k]) + 1, district_id=int(district_ids[district[k]]),
                   avg_wage=float(np.exp(log_wage[k])), population=float(pop[k]),
                   amenity=float(amenity[k]))
              for k in range(n)]
    return World(cities)


def simulate_industries(world, config):
    """District-by-industry panel consistent with the wages of ``generate_world``."""
    return _industry_draws(config, np.arange(config.districts, dtype=np.int64) + 1)


def simulate_covariates(world, config):
    """Destination characteristics used by heterogeneity and RD specifications."""
    rng = stream(config.seed, "covariates")
    n = len(world)
    branches = np.round(np.exp(rng.normal(3.0, 0.8, size=n)))
    per_branch = rng.uniform(-10.0, 10.0, size=n)
    policy = rng.uniform(0.0, 1.0, size=len(np.unique(world.state)))
    state_pos = np.searchsorted(np.unique(world.state), world.state)
    values = {
        "log_bank_branches": dict(zip(world.ids.tolist(), np.log1p(branches).tolist())),
        "pop_per_branch": dict(zip(world.ids.tolist(), per_branch.tolist())),
        "migrant_policy_index": dict(zip(world.ids.tolist(), policy[state_pos].tolist())),
    }
    return CityCovariates(values)


# --------------------------------------------------------------------------- #
# agents and networks
# --------------------------------------------------------------------------- #

def agent_taste(config, agent_id, n_cities):
    """Persistent idiosyncratic taste of one agent for moving to every city (standard normal)."""
    return stream(config.seed, "taste", agent_id).standard_normal(n_cities)


def _kernel(d_row, decay):
    w = np.maximum(d_row, 1.0) ** (-decay)
    return w


def generate_agents(world, config):
    """Year-0 residences, demographics and friend networks.

    Returns
    -------
    (AgentPanel, NetworkPanel)
        Both restricted to the first simulated year.
    """
    n, J = config.n_agents, len(world)
    ids = np.arange(1, n + 1, dtype=np.int64)
    pop_p = world.population / world.population.sum() if world.population.sum() > 0 else np.full(J, 1.0 / J)
    dist = world.distances()
    y0 = config.start_year
    home = np.empty(n, dtype=np.int64)
    birth = np.empty(n, dtype=np.int64)
    college = np.empty(n, dtype=np.int64)
    price = np.empty(n)
    friends = np.zeros((n, J), dtype=np.int64)
    s = config.friends_log_sd
    for k, aid in enumerate(ids):
        rng = stream(config.seed, "agent", aid)
        h = int(rng.choice(J, p=pop_p))
        home[k] = h
        birth[k] = y0 - int(rng.integers(18, 41))
        college[k] = int(rng.random() < 0.35)
        price[k] = float(np.round(np.exp(rng.normal(5.0, 0.6)), 2))
        total = int(rng.poisson(config.friends_mean * np.exp(rng.normal(-0.5 * s * s, s))))
        at_home = int(rng.binomial(total, config.origin_share))
        friends[k, h] = at_home
        rest = total - at_home
        if rest:
            w = _kernel(dist[h], config.kernel_decay) * pop_p
            if config.network_taste_corr > 0:
                u = agent_taste(config, aid, J)
                w = w * np.exp(config.network_taste_corr * config.network_taste_loading * u)
            w[h] = 0.0
            friends[k] += rng.multinomial(rest, w / w.sum())
    home_ids = world.ids[home]
    panel = AgentPanel(agent_ids=ids, years=np.array([y0], dtype=np.int64),
                       residence=home_ids[:, None].copy(), birth_year=birth,
                       college_flag=college, device_price=price, hometown=home_ids)
    nets = NetworkPanel.from_dense(ids, world.ids, {y0: friends})
    return panel, nets


# --------------------------------------------------------------------------- #
# weather
# --------------------------------------------------------------------------- #

def simulate_weather(world, config):
    """Long-run rainfall and hot-day series for every city.

    History years are i.i.d. draws from a city's own distribution; in panel
    years the probability of landing below the city's 15th percentile of
    rainfall (above the 85th of hot days) equals ``drought_prob``
    (``heat_prob``).
    """
    years = np.arange(config.start_year - config.weather_history_years,
                      config.start_year + config.n_years, dtype=np.int64)
    J = len(world)
    rain = np.empty((J, len(years)))
    hot = np.empty((J, len(years)))
    for c, cid in enumerate(world.ids):
        base = stream(config.seed, "climate", cid)
        mu = base.normal(np.log(1000.0), 0.3)
        sig = base.uniform(0.15, 0.35)
        hot_mu = base.uniform(20.0, 80.0)
        hot_sd = base.uniform(8.0, 15.0)
        for t, y in enumerate(years):
            rng = stream(config.seed, "weather", cid, y)
            u_r, u_h, pick_r, pick_h = rng.random(4)
            if y >= config.start_year:
                p = config.drought_prob
                u_r = 0.15 * pick_r if u_r < p else 0.15 + 0.85 * pick_r
                q = config.heat_prob
                u_h = 0.85 + 0.15 * pick_h if u_h < q else 0.85 * pick_h
            u_r = min(max(u_r, 1e-12), 1 - 1e-12)
            u_h = min(max(u_h, 1e-12), 1 - 1e-12)
            rain[c, t] = float(np.exp(mu + sig * stats.norm.ppf(u_r)))
            hot[c, t] = float(np.clip(np.round(hot_mu + hot_sd * stats.norm.ppf(u_h)), 0, 366))
    return WeatherPanel(world.ids.copy(), years, rain, hot)


# --------------------------------------------------------------------------- #
# forward simulation
# --------------------------------------------------------------------------- #

def _push_shocks(weather, world, config):
    """(n_cities, n_years) boolean shock matrix aligned to ``weather.years``."""
    from .instruments import classify_shocks

    shocked = np.zeros((len(world), len(weather.years)), dtype=bool)
    if config.push_shocks == "none":
        return shocked
    kinds = ("drought", "heat") if config.push_shocks == "both" else (config.push_shocks,)
    rows = world.positions(weather.city_ids)
    for kind in kinds:
        shocked[rows] |= classify_shocks(weather, kind).membership
    return shocked


def _gumbel_block(seed, purpose, agent_ids, year, J):
    out = np.empty((len(agent_ids), J))
    for k, aid in enumerate(agent_ids):
        out[k] = stream(seed, purpose, aid, year).gumbel(size=J)
    return out


def gumbel_draws(seed, purpose, agent_ids, year, J, n_jobs=1):
    """Standard Gumbel draws per agent, identical for any ``n_jobs``."""
    agent_ids = np.asarray(agent_ids)
    if n_jobs <= 1 or len(agent_ids) < 2 * n_jobs:
        return _gumbel_block(seed, purpose, agent_ids, year, J)
    chunks = np.array_split(np.arange(len(agent_ids)), n_jobs)
    out = np.empty((len(agent_ids), J))
    with ThreadPoolExecutor(max_workers=n_jobs) as pool:
        parts = pool.map(lambda ix: (ix, _gumbel_block(seed, purpose, agent_ids[ix], year, J)), chunks)
        for ix, block in parts:
            out[ix] = block
    return out


def heterogeneity_shift(params, world, covariates):
    """Per-destination shift of the network coefficient."""
    shift = np.zeros(len(world))
    for name, coef in params.network_heterogeneity:
        if name == "log_wage":
            x = np.log(world.wage)
        else:
            if covariates is None:
                raise ValidationError(f"covariate {name!r} needed but no covariates given")
            x = covariates.vector(name, world)
        shift += coef * x
    return shift


def simulate_panel(world, agents, networks, params, weather, config, covariates=None, n_jobs=1):
    """Forward-simulate residences and networks for ``config.n_years`` years.

    Each agent-year the agent picks the city with the highest systematic
    utility plus an i.i.d. standard Gumbel draw.  Utility uses networks and
    distances from the previous year; an agent whose origin was hit by a push
    shock in the previous year loses ``weather_penalty`` from staying.  After
    the move, friend counts stay where they are, friends in shocked cities
    flee towards nearby cities with probability ``friend_flight``, and new
    local ties accrue at the agent's new residence.
    """
    J = len(world)
    ids = agents.agent_ids
    n = len(ids)
    years = config.years
    if int(agents.years[0]) != int(years[0]):
        raise ValidationError("agent panel must start at config.start_year")
    amen = params.amenity if params.amenity is not None else world.amenity
    if len(amen) != J:
        raise ValidationError("amenity vector must have one entry per city")
    city_value = params.wage_coef * np.log(world.wage) + amen
    net_shift = heterogeneity_shift(params, world, covariates)
    same, logd, out = pair_features(world)
    dist = world.distances()
    shocks = _push_shocks(weather, world, config)
    wyear = {int(y): k for k, y in enumerate(weather.years)}
    taste = None
    if config.taste_sd > 0:
        taste = config.taste_sd * np.stack([agent_taste(config, a, J) for a in ids])
    flight_kernel = _kernel(dist, config.flight_decay)
    np.fill_diagonal(flight_kernel, 0.0)
    flight_kernel /= flight_kernel.sum(axis=1, keepdims=True)

    res = np.empty((n, len(years)), dtype=np.int64)
    res[:, 0] = world.positions(agents.residence[:, 0])
    F = networks.dense(years[0]).astype(np.int64)
    dense = {int(years[0]): F.copy()}
    rows = np.arange(n)
    for t in range(1, len(years)):
        y = int(years[t])
        o = res[:, t - 1]
        nlog = np.log1p(F)
        V = city_value[None, :] + moving_utility(params, nlog, same[o], logd[o], out[o])
        if net_shift.any():
            V += nlog * net_shift[None, :]
        if taste is not None:
            # a pull towards moving to particular cities; none for staying
            pull = taste.copy()
            pull[rows, o] = 0.0
            V += pull
        prev = wyear.get(y - 1)
        if prev is not None and config.weather_penalty:
            hit = shocks[o, prev]
            V[rows[hit], o[hit]] -= config.weather_penalty
        V += gumbel_draws(config.seed, "choice", ids, y, J, n_jobs)
        new = np.argmax(V, axis=1)
        res[:, t] = new

        F = F.copy()
        if prev is not None and config.friend_flight > 0:
            hit_cities = np.flatnonzero(shocks[:, prev])
            if len(hit_cities):
                exposed = np.flatnonzero(F[:, hit_cities].sum(axis=1) > 0)
                for k in exposed:
                    rng = stream(config.seed, "flight", ids[k], y)
                    for w in hit_cities:
                        m = F[k, w]
                        if m == 0:
                            continue
                        leave = int(rng.binomial(m, config.friend_flight))
                        if leave:
                            F[k, w] -= leave
                            F[k] += rng.multinomial(leave, flight_kernel[w])
        if config.accrual_rate > 0:
            lam = config.accrual_rate * (F.sum(axis=1) + 1.0)
            gained = np.array([stream(config.seed, "accrual", a, y).poisson(l) for a, l in zip(ids, lam)])
            F[rows, new] += gained
        dense[y] = F

    panel = AgentPanel(agent_ids=ids.copy(), years=years.copy(), residence=world.ids[res],
                       birth_year=agents.birth_year.copy(), college_flag=agents.college_flag.copy(),
                       device_price=agents.device_price.copy(), hometown=agents.hometown.copy())
    return panel, NetworkPanel.from_dense(ids, world.ids, dense)


def simulate_survey(world, params, n_respondents, seed, interactions=False):
    """Dream-city answers: amenity plus distance utility, no wages or networks."""
    J = len(world)
    amen = params.amenity if params.amenity is not None else world.amenity
    pop_p = world.population / world.population.sum()
    same, logd, out = pair_features(world)
    zero = np.zeros((J, J))
    base = amen[None, :] + moving_utility(params, zero, same, logd, out, interactions=False)
    cur = np.empty(n_respondents, dtype=np.int64)
    dream = np.empty(n_respondents, dtype=np.int64)
    for r in range(n_respondents):
        rng = stream(seed, "survey", r + 1)
        c = int(rng.choice(J, p=pop_p))
        cur[r] = c
        dream[r] = int(np.argmax(base[c] + rng.gumbel(size=J)))
    return SurveyChoices(np.arange(1, n_respondents + 1, dtype=np.int64), world.ids[cur], world.ids[dream])


@dataclass(frozen=True, eq=False)
class SyntheticData:
    world: World
    agents: AgentPanel
    networks: NetworkPanel
    weather: WeatherPanel
    industries: IndustryPanel
    covariates: CityCovariates
    survey: SurveyChoices
    params: ParameterSet
    config: DgpConfig


def simulate(config, params=None, n_survey=2000, n_jobs=1):
    """Generate a complete synthetic bundle from one configuration."""
    world = generate_world(config)
    params = ParameterSet() if params is None else params
    if params.amenity is None:
        params = params.with_amenity(world.amenity)
    agents0, nets0 = generate_agents(world, config)
    weather = simulate_weather(world, config)
    covariates = simulate_covariates(world, config)
    agents, nets = simulate_panel(world, agents0, nets0, params, weather, config,
                                  covariates=covariates, n_jobs=n_jobs)
    survey = simulate_survey(world, params, n_survey, config.seed)
    return SyntheticData(world=world, agents=agents, networks=nets, weather=weather,
                         industries=simulate_industries(world, config), covariates=covariates,
                         survey=survey, params=params, config=config)

"""Instruments for networks and wages.

Network instrument: friends an agent had two years earlier in the shocked
city nearest to each destination, controlling for distance to that shock.
Wage instrument: shift-share exposure of each district to national
industry trends.
"""
from dataclasses import dataclass
import logging

import numpy as np

from .choice import ChoiceData, ModelSpec, fit_logit
from .choice.model import CF_COLUMN
from .data_io import MIN_WEATHER_WINDOW
from .exceptions import ValidationError
from .linear import fe_regress, ols, tsls
from .utility import log_distance

log = logging.getLogger(__name__)

SHOCK_TYPES = {"drought": ("rainfall", 15.0), "heat": ("hot_days", 85.0)}


@dataclass(frozen=True, eq=False)
class ShockSet:
    """Which cities were hit by a weather shock in which year.

    ``membership`` is ``(n_cities, n_years)`` aligned to ``city_ids`` and
    ``years``; ``thresholds`` are the per-city percentile cut-offs.
    """

    shock_type: str
    city_ids: np.ndarray
    years: np.ndarray
    membership: np.ndarray
    thresholds: np.ndarray

    def __eq__(self, other):
        return (isinstance(other, ShockSet) and self.shock_type == other.shock_type
                and all(np.array_equal(getattr(self, f), getattr(other, f))
                        for f in ("city_ids", "years", "membership", "thresholds")))

    def shocked(self, year):
        """City ids shocked in ``year`` (empty if the year is not covered)."""
        k = np.flatnonzero(self.years == int(year))
        if not len(k):
            return np.empty(0, dtype=np.int64)
        return self.city_ids[self.membership[:, k[0]]]

    def rate(self, years=None):
        cols = np.ones(len(self.years), dtype=bool) if years is None else np.isin(self.years, years)
        return float(self.membership[:, cols].mean())


def classify_shocks(weather, shock_type):
    """Flag drought (rainfall strictly below the city's 15th percentile) or
    heat (hot days strictly above the 85th) city-years.

    Percentiles are linear-interpolation quantiles over the weather window.
    """
    if shock_type not in SHOCK_TYPES:
        raise ValidationError(f"shock type must be one of {sorted(SHOCK_TYPES)}, got {shock_type!r}")
    field_name, pct = SHOCK_TYPES[shock_type]
    mask = weather.window_mask()
    if mask.sum() < MIN_WEATHER_WINDOW:
        raise ValidationError(f"weather window has {mask.sum()} years; need at least {MIN_WEATHER_WINDOW}")
    values = getattr(weather, field_name)
    thr = np.percentile(values[:, mask], pct, axis=1, method="linear")
    member = values < thr[:, None] if shock_type == "drought" else values > thr[:, None]
    return ShockSet(shock_type, weather.city_ids.copy(), weather.years.copy(), member, thr)


def nearest_shocked(world, shocks, year):
    """For every city, the position of and distance to its nearest shocked city.

    Returns ``None`` when no city was shocked in ``year``.  Ties go to the
    lowest city id.
    """
    hit = shocks.shocked(year)
    if not len(hit):
        return None
    pos = np.sort(world.positions(hit))
    d = world.distances()[:, pos]
    k = np.argmin(d, axis=1)
    return pos[k], d[np.arange(len(world)), k]


def nearest_shocked_city(city_id, year, shocks, world):
    """``(city_id, distance_km)`` of the shocked city nearest to ``city_id``, or None."""
    res = nearest_shocked(world, shocks, year)
    if res is None:
        return None
    j = world.index(city_id)
    return int(world.ids[res[0][j]]), float(res[1][j])


@dataclass(frozen=True, eq=False)
class InstrumentRows:
    """Instrument values for the rows of ``data`` (a subset of the input).

    ``obs_mask`` marks which input observations were kept.
    """

    data: ChoiceData
    obs_mask: np.ndarray
    shocked_city: np.ndarray
    shock_distance: np.ndarray
    friends_in_shocked: np.ndarray
    n_dropped_obs: int

    @property
    def has_friend(self):
        return (self.friends_in_shocked > 0).astype(float)


def instrument_rows(data, networks, shocks, world, lag=2):
    """Attach the nearest-shock instrument to each alternative.

    For a choice in year ``t`` the shock year and friend counts are from
    ``t - lag``.  Choice problems whose shock year had no shocked city, or
    whose friends are not observed in that year, are dropped and counted.
    """
    net_years = set(int(y) for y in networks.years)
    keep = np.zeros(data.n_obs, dtype=bool)
    cache = {}
    for y in np.unique(data.year):
        s = int(y) - lag
        if s in net_years:
            cache[s] = nearest_shocked(world, shocks, s)
        keep[data.year == y] = s in net_years and cache.get(s) is not None
    dropped = int((~keep).sum())
    if dropped:
        log.info("instrument: dropped %d choice problems with no shocked city or no network at t-%d",
                 dropped, lag)
    if not keep.any():
        raise ValidationError(f"no choice problem has a shocked city and networks at t-{lag}")
    sub = data.select_obs(keep)
    obs = sub.row_obs
    w = np.empty(sub.n_rows, dtype=np.int64)
    dist = np.empty(sub.n_rows)
    friends = np.zeros(sub.n_rows)
    agent_pos = np.searchsorted(networks.agent_ids, sub.agent_id)
    for y in np.unique(sub.year):
        s = int(y) - lag
        near_pos, near_d = cache[s]
        rows = np.flatnonzero(sub.year[obs] == y)
        w[rows] = near_pos[sub.city[rows]]
        dist[rows] = near_d[sub.city[rows]]
        F = networks.at(s)
        friends[rows] = np.asarray(F[agent_pos[obs[rows]], w[rows]]).ravel()
    return InstrumentRows(data=sub, obs_mask=keep, shocked_city=world.ids[w], shock_distance=dist,
                          friends_in_shocked=friends, n_dropped_obs=dropped)


@dataclass(frozen=True, eq=False)
class FirstStageResult:
    """First-stage regression of destination log friends on the instrument.

    ``residuals`` are aligned to the rows of ``rows.data``.
    """

    form: str
    regression: object
    residuals: np.ndarray
    rows: InstrumentRows
    instrument: str

    @property
    def theta(self):
        return self.regression[self.instrument]

    @property
    def theta_t(self):
        return self.regression.tstat(self.instrument)

    @property
    def r2(self):
        return self.regression.r2


def first_stage_design(rows, form, instrument=None):
    """Regressor matrix and names for the simplified or full first stage."""
    d = rows.data
    if instrument is None:
        instrument = rows.has_friend if form == "simplified" else np.log1p(rows.friends_in_shocked)
    at_shock = rows.shock_distance == 0
    logd_w = log_distance(rows.shock_distance, at_shock)
    lo = d.log_distance * d.out_of_state
    if form == "simplified":
        names = ("has_friend_in_shocked", "shock_at_destination", "log_distance_to_shock",
                 "has_friend_x_log_distance_to_shock")
        cols = [instrument, at_shock.astype(float), logd_w, instrument * logd_w]
    elif form == "full":
        names = ("log_friends_in_shocked", "shock_at_destination", "log_distance_to_shock")
        cols = [instrument, at_shock.astype(float), logd_w]
    else:
        raise ValidationError(f"first-stage form must be 'simplified' or 'full', got {form!r}")
    names += ("same_city", "log_distance", "log_distance_x_out_of_state")
    cols += [d.same_city.astype(float), d.log_distance, lo]
    return np.column_stack(cols), names


def first_stage(rows, form="simplified", instrument=None):
    """OLS of ``log(1 + friends)`` on the instrument with distance-to-shock
    controls, the main model's distance terms, destination and agent-year
    fixed effects; errors clustered by agent-year.

    ``instrument`` overrides the instrument column (e.g. for placebos).
    """
    d = rows.data
    X, names = first_stage_design(rows, form, instrument)
    obs = d.row_obs
    groups = [d.city, obs]
    reg = fe_regress(d.log_friends, X, groups, clusters=obs, names=names)
    return FirstStageResult(form=form, regression=reg, residuals=reg.resid, rows=rows,
                            instrument=names[0])


def control_function_fit(first, spec=None, world=None, covariates=None, **options):
    """Refit the choice model with the first-stage residual as a covariate."""
    spec = ModelSpec() if spec is None else spec
    if not spec.control_function:
        spec = ModelSpec(**{**{k: getattr(spec, k) for k in spec.__dataclass_fields__},
                            "control_function": True})
    data = first.rows.data.with_column(CF_COLUMN, first.residuals)
    return fit_logit(data, spec, world, covariates, **options)


# --------------------------------------------------------------------------- #
# amenities from stated preferences
# --------------------------------------------------------------------------- #

@dataclass(frozen=True, eq=False)
class AmenityEstimates:
    city_ids: np.ndarray
    amenity: np.ndarray
    se: np.ndarray
    fit: object


def survey_choice_data(survey, world):
    """Every city is an alternative for every respondent; no networks."""
    J = len(world)
    n = len(survey)
    cur = world.positions(survey.current_city)
    dream = world.positions(survey.dream_city)
    city = np.tile(np.arange(J), n)
    origin_rows = np.repeat(cur, J)
    same = city == origin_rows
    dist = world.distances()[origin_rows, city]
    return ChoiceData(agent_id=np.asarray(survey.respondent_id, dtype=np.int64),
                      year=np.zeros(n, dtype=np.int64), origin=cur,
                      offsets=np.arange(0, n * J + 1, J, dtype=np.int64), city=city,
                      log_friends=np.zeros(n * J), same_city=same,
                      log_distance=log_distance(dist, same),
                      out_of_state=world.state[origin_rows] != world.state[city],
                      inclusion_log_prob=np.zeros(n * J), chosen=city == np.repeat(dream, J),
                      city_ids=world.ids.copy())


def amenities_from_survey(survey, world, **options):
    """Amenities from a logit of dream-city choices on city dummies and
    distance terms (no networks, no wages).  The lowest city id is the
    reference with amenity zero.
    """
    data = survey_choice_data(survey, world)
    spec = ModelSpec(fe="destination", network=False, sampling_correction=False)
    fit = fit_logit(data, spec, **options)
    fe = dict(zip(fit.names, fit.coef))
    se = dict(zip(fit.names, fit.se))
    ids = world.ids
    amen = np.array([fe.get(f"dest[{c}]", 0.0) for c in ids])
    ses = np.array([se.get(f"dest[{c}]", 0.0) for c in ids])
    return AmenityEstimates(city_ids=ids.copy(), amenity=amen, se=ses, fit=fit)


# --------------------------------------------------------------------------- #
# shift-share wage instruments
# --------------------------------------------------------------------------- #

@dataclass(frozen=True, eq=False)
class BartikVector:
    district_ids: np.ndarray
    wage: np.ndarray
    labor: np.ndarray
    base_year: int
    end_year: int

    def for_cities(self, world):
        """Instrument values of each city's district, aligned to ``world``."""
        pos = np.searchsorted(self.district_ids, world.district)
        ok = (pos < len(self.district_ids)) & (self.district_ids[np.minimum(pos, len(self.district_ids) - 1)]
                                              == world.district)
        if not ok.all():
            raise ValidationError(f"no shift-share values for districts {sorted(set(world.district[~ok]))[:5]}")
        return self.wage[pos], self.labor[pos]


def bartik(industries, base_year=None, end_year=None):
    """Shift-share exposures to national wage and employment growth.

    ``wage_j = sum_k (L_jk / L_j) * dY_k`` and ``labor_j = sum_k (Y_jk / Y_j)
    * dL_k`` with base-year shares and national changes equal to the plain
    mean over districts of end-year minus base-year values.  An industry
    absent from a district in both years contributes nothing; present in only
    one of them is an error.
    """
    years = [int(y) for y in industries.years]
    b = years[0] if base_year is None else int(base_year)
    e = years[-1] if end_year is None else int(end_year)
    if b not in years or e not in years or b == e:
        raise ValidationError(f"base/end years {b}/{e} not both in industry years {years}")
    ib, ie = years.index(b), years.index(e)
    L, Y = industries.employment, industries.wage
    present_b = ~np.isnan(L[:, :, ib])
    present_e = ~np.isnan(L[:, :, ie])
    bad = np.argwhere(present_b != present_e)
    if len(bad):
        d, k = bad[0]
        which = "base" if not present_b[d, k] else "end"
        raise ValidationError(
            f"missing {which}-year row for district {industries.district_ids[d]}, "
            f"industry {industries.industries[k]}")
    Lb, Le = np.nan_to_num(L[:, :, ib]), np.nan_to_num(L[:, :, ie])
    Yb, Ye = np.nan_to_num(Y[:, :, ib]), np.nan_to_num(Y[:, :, ie])
    n_d = L.shape[0]
    dY = (Ye.sum(axis=0) - Yb.sum(axis=0)) / n_d
    dL = (Le.sum(axis=0) - Lb.sum(axis=0)) / n_d
    Lsum, Ysum = Lb.sum(axis=1), Yb.sum(axis=1)
    if np.any(Lsum <= 0) or np.any(Ysum <= 0):
        bad = industries.district_ids[(Lsum <= 0) | (Ysum <= 0)]
        raise ValidationError(f"districts with no base-year employment or wages: {list(bad[:5])}")
    wage = (Lb / Lsum[:, None]) @ dY
    labor = (Yb / Ysum[:, None]) @ dL
    return BartikVector(np.asarray(industries.district_ids).copy(), wage, labor, b, e)


@dataclass(frozen=True, eq=False)
class WageElasticity:
    mode: str
    beta: float
    se: float
    first_stage_f: float
    regression: object
    n_cities: int


WAGE_MODES = ("ols", "iv_wage", "iv_labor", "iv_both")


def destination_weights(data, n_cities):
    """How often each city appears as an alternative in the choice data."""
    return np.bincount(data.city, minlength=n_cities).astype(float)


def wage_elasticity_two_step(xi, world, shift_share, mode="iv_both", controls=None, weights=None):
    """Second step: regress destination effects on log wages.

    Parameters
    ----------
    xi : array
        Destination effects aligned to ``world`` (NaN where not estimated).
    shift_share : BartikVector
    mode : {"ols", "iv_wage", "iv_labor", "iv_both"}
    controls : array of shape (n_cities, m), optional
    weights : array, optional
        Per-city regression weights (e.g. ``destination_weights``).
    """
    if mode not in WAGE_MODES:
        raise ValidationError(f"mode must be one of {WAGE_MODES}, got {mode!r}")
    xi = np.asarray(xi, dtype=float)
    J = len(world)
    ok = np.isfinite(xi)
    if weights is not None:
        weights = np.asarray(weights, dtype=float)
        ok &= weights > 0
    logy = np.log(world.wage)
    ex = [np.ones(J)]
    ex_names = ["intercept"]
    if controls is not None:
        C = np.asarray(controls, dtype=float).reshape(J, -1)
        ex += [C[:, m] for m in range(C.shape[1])]
        ex_names += [f"control{m}" for m in range(C.shape[1])]
    Xx = np.column_stack(ex)[ok]
    w = None if weights is None else weights[ok]
    if mode == "ols":
        reg = ols(xi[ok], np.column_stack([logy[ok], Xx]), names=["log_wage"] + ex_names, weights=w)
        f = float("nan")
    else:
        bw, bl = shift_share.for_cities(world)
        Z = {"iv_wage": [bw], "iv_labor": [bl], "iv_both": [bw, bl]}[mode]
        znames = {"iv_wage": ["bartik_wage"], "iv_labor": ["bartik_labor"],
                  "iv_both": ["bartik_wage", "bartik_labor"]}[mode]
        reg = tsls(xi[ok], logy[ok], Xx, np.column_stack(Z)[ok], endog_names=["log_wage"],
                   exog_names=ex_names, instrument_names=znames, weights=w)
        f = reg.first_stage_f["log_wage"]
    return WageElasticity(mode=mode, beta=reg["log_wage"], se=reg.se_of("log_wage"),
                          first_stage_f=f, regression=reg, n_cities=int(ok.sum()))

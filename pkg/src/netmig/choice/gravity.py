"""Willingness-to-pay ratios and the network decomposition of gravity."""
from dataclasses import dataclass

import numpy as np

from ..exceptions import ValidationError
from ..linear import ols
from ..utility import DISTANCE_FEATURES, FEATURES, feature_columns

_DIST_LABEL = {"same_city": "fixed", "log_distance": "log_distance",
               "log_distance_x_out_of_state": "out_of_state"}


def moving_costs(fit, data=None):
    """Model-implied moving cost of every row: the utility of distance terms.

    For specifications with origin-destination-year cells the cell effects
    play that role; rows whose cell was not estimated are left out.

    Returns
    -------
    dict
        Row arrays ``agent_id``, ``year``, ``city_id``, ``log_distance``, ``mc``.
    """
    data = fit.design.data if data is None else data
    s = fit.structural
    obs = data.row_obs
    if fit.spec.fe == "bct":
        fe = fit.fixed_effects
        ids = data.city_ids
        mc = np.array([fe.get(f"odt[{ids[o]},{ids[c]},{y}]", np.nan) for o, c, y in
                       zip(data.origin[obs], data.city, data.year[obs])])
    else:
        cols = feature_columns(data.log_friends, data.same_city, data.log_distance,
                               data.out_of_state, False)
        mc = np.zeros(data.n_rows)
        for name in DISTANCE_FEATURES:
            mc += s.get(name, 0.0) * cols[name]
    keep = np.isfinite(mc)
    return {"agent_id": data.agent_id[obs][keep], "year": data.year[obs][keep],
            "city_id": data.city_ids[data.city][keep], "log_distance": data.log_distance[keep],
            "mc": mc[keep]}


def implied_distance_coef(log_dist, mc, movers_only=True):
    """Slope of an intercept-plus-log-distance OLS of moving costs."""
    log_dist = np.asarray(log_dist, dtype=float)
    mc = np.asarray(mc, dtype=float)
    rows = log_dist > 0 if movers_only else np.ones(len(mc), dtype=bool)
    if rows.sum() < 2:
        raise ValidationError("need at least two rows with positive distance")
    X = np.column_stack([np.ones(rows.sum()), log_dist[rows]])
    return ols(mc[rows], X, names=("intercept", "log_distance"))["log_distance"]


def mwtp_distance(fit, data=None, movers_only=True):
    """Network coefficient over the absolute implied log-distance coefficient."""
    rows = moving_costs(fit, data)
    delta = implied_distance_coef(rows["log_distance"], rows["mc"], movers_only)
    if delta == 0:
        raise ValidationError("implied distance coefficient is zero")
    return fit["log_friends"] / abs(delta)


def mwtp_wages(network_coef, wage_coef, eps=1e-12):
    """Network coefficient in units of the log-wage coefficient."""
    if not np.isfinite(wage_coef) or abs(wage_coef) < eps:
        raise ValidationError(f"wage coefficient too close to zero: {wage_coef}")
    return network_coef / wage_coef


@dataclass(frozen=True, eq=False)
class GravityDecomposition:
    """Distance coefficients with and without networks.

    ``full`` holds the estimated coefficients, ``no_interaction`` the OLS of
    moving costs on log friends plus distance terms, ``no_network`` the OLS on
    distance terms only.  Reductions are ``(|nn| - |x|) / |nn|`` per term.
    """

    full: dict
    no_interaction: dict
    no_network: dict
    reduction_full: dict
    reduction_no_interaction: dict
    n_rows: int


def true_moving_costs(coefs, log_friends, same_city, log_dist, out_of_state):
    """Network plus distance utility of each row under ``coefs``."""
    cols = feature_columns(log_friends, same_city, log_dist, out_of_state, True)
    mc = np.zeros(len(log_friends))
    for name in FEATURES:
        mc += coefs.get(name, 0.0) * cols[name]
    return mc


def decomposition_regressions(mc, log_friends, same_city, log_dist, out_of_state):
    """The two least-squares fits behind the decomposition."""
    cols = feature_columns(log_friends, same_city, log_dist, out_of_state, False)
    one = np.ones(len(mc))
    dist = [cols[k] for k in DISTANCE_FEATURES]
    ni = ols(mc, np.column_stack([one, cols["log_friends"]] + dist),
             names=("intercept", "log_friends") + DISTANCE_FEATURES)
    nn = ols(mc, np.column_stack([one] + dist), names=("intercept",) + DISTANCE_FEATURES)
    return ni, nn


def gravity_decomposition(fit, data=None):
    """Compare estimated distance terms with those of network-free regressions."""
    data = fit.design.data if data is None else data
    s = fit.structural
    missing = [k for k in FEATURES if k not in s]
    if missing:
        raise ValidationError(f"decomposition needs a fit with all distance and network terms; missing {missing}")
    mc = true_moving_costs(s, data.log_friends, data.same_city, data.log_distance, data.out_of_state)
    ni, nn = decomposition_regressions(mc, data.log_friends, data.same_city, data.log_distance,
                                       data.out_of_state)
    full = {_DIST_LABEL[k]: s[k] for k in DISTANCE_FEATURES}
    full["log_friends"] = s["log_friends"]
    no_int = {_DIST_LABEL[k]: ni[k] for k in DISTANCE_FEATURES}
    no_int["log_friends"] = ni["log_friends"]
    no_net = {_DIST_LABEL[k]: nn[k] for k in DISTANCE_FEATURES}

    def red(x):
        return {k: (abs(no_net[k]) - abs(x[k])) / abs(no_net[k]) if no_net[k] != 0 else np.nan
                for k in no_net}

    return GravityDecomposition(full=full, no_interaction=no_int, no_network=no_net,
                                reduction_full=red(full), reduction_no_interaction=red(no_int),
                                n_rows=data.n_rows)


def gravity_curve(fit, decomposition, friends_grid, wage_coef=None):
    """Net marginal effect of each distance term as friends vary.

    Returns per-term arrays for the full model (coefficient plus its network
    interaction times ``log1p(friends)``) and the constant no-network and
    no-interaction values.  Dividing by ``wage_coef`` expresses them in
    log-wage units.
    """
    s = fit.structural
    n = np.log1p(np.asarray(friends_grid, dtype=float))
    scale = 1.0 if wage_coef is None else 1.0 / wage_coef
    pairs = {"fixed": ("same_city", "same_city_x_log_friends"),
             "log_distance": ("log_distance", "log_distance_x_log_friends"),
             "out_of_state": ("log_distance_x_out_of_state", "log_distance_x_out_of_state_x_log_friends")}
    out = {"friends": np.asarray(friends_grid, dtype=float)}
    for term, (base, inter) in pairs.items():
        out[f"{term}_full"] = scale * (s[base] + s[inter] * n)
        out[f"{term}_no_interaction"] = np.full(len(n), scale * decomposition.no_interaction[term])
        out[f"{term}_no_network"] = np.full(len(n), scale * decomposition.no_network[term])
    return out

"""Structural parameters and the distance/network utility features.

Systematic utility of living in city ``j`` for an agent whose origin is ``o``::

    V = wage_coef * log(wage_j) + amenity_j
        + network_coef * n
        + stay_bonus * S + log_distance_coef * L + out_of_state_coef * L*O
        + stay_network_coef * S*n + distance_network_coef * L*n
        + out_of_state_network_coef * L*O*n

with ``n = log1p(friends in j)``, ``S = 1{j == o}``, ``L = log(max(D_oj, 1 km))``
for ``j != o`` (zero at the origin) and ``O = 1{state(j) != state(o)}``.
The stay bonus is the gain from not moving, i.e. the fixed moving cost with
the sign flipped.
"""
from dataclasses import dataclass, field, replace

import numpy as np

from .exceptions import ValidationError

FEATURES = (
    "log_friends",
    "same_city",
    "log_distance",
    "log_distance_x_out_of_state",
    "same_city_x_log_friends",
    "log_distance_x_log_friends",
    "log_distance_x_out_of_state_x_log_friends",
)
DISTANCE_FEATURES = FEATURES[1:4]
INTERACTION_FEATURES = FEATURES[4:]

# feature name -> ParameterSet attribute
_COEF_ATTR = {
    "log_friends": "network_coef",
    "same_city": "stay_bonus",
    "log_distance": "log_distance_coef",
    "log_distance_x_out_of_state": "out_of_state_coef",
    "same_city_x_log_friends": "stay_network_coef",
    "log_distance_x_log_friends": "distance_network_coef",
    "log_distance_x_out_of_state_x_log_friends": "out_of_state_network_coef",
}


@dataclass(frozen=True, eq=False)
class ParameterSet:
    """Structural coefficients of location choice and of the equilibrium.

    Defaults are the calibrated spatial-equilibrium values: wage elasticity
    1.11, network elasticity 0.71, distance terms (6.3, -0.55, 0.05),
    distance-by-network terms (-0.57, 0.08, -0.02), agglomeration 0.10, price
    congestion 0.02 and amenity congestion 0.02.

    ``network_heterogeneity`` holds ``(covariate_name, coef)`` pairs that shift
    the network coefficient by destination characteristics.
    """

    wage_coef: float = 1.11
    network_coef: float = 0.71
    stay_bonus: float = 6.3
    log_distance_coef: float = -0.55
    out_of_state_coef: float = 0.05
    stay_network_coef: float = -0.57
    distance_network_coef: float = 0.08
    out_of_state_network_coef: float = -0.02
    amenity: np.ndarray = None
    agglomeration: float = 0.10
    price_congestion: float = 0.02
    amenity_congestion: float = 0.02
    network_heterogeneity: tuple = field(default=())

    def __post_init__(self):
        for name in ("wage_coef", "network_coef", "stay_bonus", "log_distance_coef",
                     "out_of_state_coef", "stay_network_coef", "distance_network_coef",
                     "out_of_state_network_coef", "agglomeration", "price_congestion",
                     "amenity_congestion"):
            if not np.isfinite(getattr(self, name)):
                raise ValidationError(f"parameter {name} must be finite")
        if self.amenity is not None:
            a = np.asarray(self.amenity, dtype=float)
            if not np.all(np.isfinite(a)):
                raise ValidationError("amenity vector must be finite")
            object.__setattr__(self, "amenity", a)

    def coefficients(self, interactions=True):
        """Feature-name -> coefficient mapping used by the utility features."""
        names = FEATURES if interactions else FEATURES[:4]
        return {f: float(getattr(self, _COEF_ATTR[f])) for f in names}

    def with_amenity(self, amenity):
        return replace(self, amenity=np.asarray(amenity, dtype=float))

    def replace(self, **kw):
        return replace(self, **kw)

    def __eq__(self, other):
        if not isinstance(other, ParameterSet):
            return False
        for f in self.__dataclass_fields__:
            a, b = getattr(self, f), getattr(other, f)
            if f == "amenity":
                if (a is None) != (b is None) or (a is not None and not np.array_equal(a, b)):
                    return False
            elif a != b:
                return False
        return True


def log_distance(d_km, same):
    """``log(max(D, 1))`` for distinct cities and exactly 0 for the origin."""
    d = np.asarray(d_km, dtype=float)
    out = np.log(np.maximum(d, 1.0))
    return np.where(same, 0.0, out)


def pair_features(world):
    """Origin-by-destination arrays ``(S, L, O)`` for a world."""
    n = len(world)
    same = np.eye(n, dtype=bool)
    logd = log_distance(world.distances(), same)
    out = world.state[:, None] != world.state[None, :]
    return same, logd, out


def feature_columns(n, same, logd, out, interactions=True):
    """Utility features as a dict of equally shaped arrays."""
    s = np.asarray(same, dtype=float)
    lo = logd * np.asarray(out, dtype=float)
    cols = {
        "log_friends": n,
        "same_city": s,
        "log_distance": logd,
        "log_distance_x_out_of_state": lo,
    }
    if interactions:
        cols["same_city_x_log_friends"] = s * n
        cols["log_distance_x_log_friends"] = logd * n
        cols["log_distance_x_out_of_state_x_log_friends"] = lo * n
    return cols


def moving_utility(params, n, same, logd, out, interactions=True):
    """Network plus distance part of systematic utility (``gamma N - delta(D, N)``)."""
    coefs = params.coefficients(interactions)
    cols = feature_columns(n, same, logd, out, interactions)
    total = np.zeros(np.broadcast(n, same, logd).shape)
    for name, value in coefs.items():
        total = total + value * cols[name]
    return total

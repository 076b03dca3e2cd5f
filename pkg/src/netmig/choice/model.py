"""Model specifications, design matrices and the conditional-logit likelihood."""
from dataclasses import dataclass, field
import logging

import numpy as np
from scipy import sparse

from ..exceptions import SeparationError, ValidationError
from ..utility import FEATURES, feature_columns, moving_utility

log = logging.getLogger(__name__)

FE_LEVELS = ("none", "destination", "destination_year", "bct")
CF_COLUMN = "cf_residual"
RD_BANDWIDTH = 3.3
MAX_BCT_CELLS = 250_000


@dataclass(frozen=True)
class RDSpec:
    """Network effect shifted by a running variable and an above-cutoff dummy.

    Alternatives whose running variable lies farther than ``bandwidth`` from
    ``cutoff`` are dropped, as are choices of such cities.
    """

    covariate: str
    cutoff: float
    bandwidth: float = RD_BANDWIDTH

    def __post_init__(self):
        if not self.bandwidth > 0:
            raise ValidationError("RD bandwidth must be positive")


@dataclass(frozen=True, eq=False)
class ModelSpec:
    """What enters systematic utility.

    Parameters
    ----------
    fe : {"none", "destination", "destination_year", "bct"}
        Fixed-effect level; ``bct`` uses origin-by-destination-by-year cells
        that absorb every distance term.
    network : bool
        Include ``log(1 + friends)``.
    interactions : bool
        Include distance-by-network interactions.
    heterogeneity : tuple of str
        City covariates interacted with log friends (``"log_wage"`` uses
        the world's wages).
    rd : RDSpec, optional
    control_function : bool
        Include the row column ``cf_residual`` as a covariate.
    include_wage : bool
        Estimate a coefficient on destination log wage (not with FE).
    wage_offset : float, optional
        Fixed coefficient on log wage entering as an offset.
    amenity_offset : array, optional
        Fixed per-city utility offsets aligned to the world.
    sampling_correction : bool
        Subtract each row's inclusion log-probability from utility.
    separation : {"raise", "drop"}
        What to do with destination(-year) effects that are not identified
        because the level is never chosen or always chosen: raise
        ``SeparationError`` or drop the offending alternatives and choice
        problems (their effects are at the infinite limit).  Origin-by-
        destination-by-year cells are always cleaned this way.
    """

    fe: str = "destination"
    network: bool = True
    interactions: bool = False
    heterogeneity: tuple = ()
    rd: RDSpec = None
    control_function: bool = False
    include_wage: bool = False
    wage_offset: float = None
    amenity_offset: np.ndarray = None
    sampling_correction: bool = True
    separation: str = "raise"

    def __post_init__(self):
        if self.separation not in ("raise", "drop"):
            raise ValidationError(f"separation must be 'raise' or 'drop', got {self.separation!r}")
        if self.fe not in FE_LEVELS:
            raise ValidationError(f"fe must be one of {FE_LEVELS}, got {self.fe!r}")
        if self.include_wage and self.fe != "none":
            raise ValidationError("a wage coefficient is not identified alongside destination fixed effects")
        if self.include_wage and self.wage_offset is not None:
            raise ValidationError("choose either an estimated wage coefficient or a fixed offset")
        if (self.interactions or self.heterogeneity or self.rd) and not self.network:
            raise ValidationError("network interactions require network=True")
        object.__setattr__(self, "heterogeneity", tuple(self.heterogeneity))
        if self.amenity_offset is not None:
            object.__setattr__(self, "amenity_offset", np.asarray(self.amenity_offset, dtype=float))

    @property
    def distance_terms(self):
        return self.fe != "bct"

    def structural_names(self):
        names = []
        if self.network:
            names.append("log_friends")
        if self.distance_terms:
            names += list(FEATURES[1:4])
        if self.interactions:
            names += list(FEATURES[4:])
        if self.include_wage:
            names.append("log_wage")
        names += [f"log_friends_x_{h}" for h in self.heterogeneity]
        if self.rd is not None:
            names += ["log_friends_x_running", "log_friends_x_above"]
        if self.control_function:
            names.append(CF_COLUMN)
        return names


def city_covariate(name, world, covariates):
    if name == "log_wage":
        return np.log(world.wage)
    if covariates is None:
        raise ValidationError(f"city covariate {name!r} requested but no covariate table given")
    return covariates.vector(name, world)


@dataclass(frozen=True, eq=False)
class Design:
    X: sparse.csr_matrix
    names: tuple
    offset: np.ndarray
    n_structural: int
    data: object
    dropped_rows: int = 0
    dropped_obs: int = 0
    fe_levels: dict = field(default_factory=dict)


def _rd_filter(data, spec, world, covariates):
    x = city_covariate(spec.rd.covariate, world, covariates)
    inside = np.abs(x - spec.rd.cutoff) <= spec.rd.bandwidth
    chosen_inside = inside[data.chosen_city]
    d1 = data.select_obs(chosen_inside)
    d2, _ = d1.select_rows(inside[d1.city])
    return d2


def _bct_cells(data):
    obs = data.row_obs
    return np.column_stack([data.origin[obs], data.city, data.year[obs]])


def _level_codes(data, fe):
    obs = data.row_obs
    if fe == "destination":
        keys = data.city[:, None]
    elif fe == "destination_year":
        keys = np.column_stack([data.year[obs], data.city])
    else:
        keys = _bct_cells(data)
    _, code = np.unique(keys, axis=0, return_inverse=True)
    return code.ravel()


def _drop_unidentified(data, fe):
    """Drop FE levels that are never chosen and choices fully absorbed by
    their level (chosen every time the level is available), until none is
    left.  Both would send a fixed effect to infinity."""
    n_rows0, n_obs0 = data.n_rows, data.n_obs
    while data.n_obs:
        code = _level_codes(data, fe)
        n_levels = int(code.max()) + 1
        chosen = np.bincount(code, weights=data.chosen, minlength=n_levels)
        present = np.bincount(code, minlength=n_levels)
        never = chosen[code] == 0
        sure = (chosen == present)[code] & data.chosen
        always_obs = np.zeros(data.n_obs, dtype=bool)
        always_obs[data.row_obs[sure]] = True
        if always_obs.any():
            data = data.select_obs(~always_obs)
        elif never.any():
            data, _ = data.select_rows(~never)
        else:
            break
    return data, n_rows0 - data.n_rows, n_obs0 - data.n_obs


def _fe_columns(data, spec):
    """Sparse one-hot FE block, names and level bookkeeping."""
    obs = data.row_obs
    ids = data.city_ids
    if spec.fe == "destination":
        keys = data.city[:, None]
        groups = np.zeros(data.n_rows, dtype=np.int64)
        label = lambda k: f"dest[{ids[k[0]]}]"
    elif spec.fe == "destination_year":
        keys = np.column_stack([data.year[obs], data.city])
        groups = data.year[obs]
        label = lambda k: f"dest_year[{ids[k[1]]},{k[0]}]"
    else:
        keys = _bct_cells(data)
        groups = None
        label = lambda k: f"odt[{ids[k[0]]},{ids[k[1]]},{k[2]}]"
    levels, code = np.unique(keys, axis=0, return_inverse=True)
    code = code.ravel()
    L = len(levels)
    if spec.fe == "bct" and L > MAX_BCT_CELLS:
        raise ValidationError(f"{L} origin-destination-year cells exceed the limit of {MAX_BCT_CELLS}")
    if spec.fe == "bct":
        # reference: the stay cell of each (origin, year) when present
        og = levels[:, [0, 2]]
        _, group = np.unique(og, axis=0, return_inverse=True)
        group = group.ravel()
        is_stay = levels[:, 0] == levels[:, 1]
        ref = np.zeros(L, dtype=bool)
        for g in np.unique(group):
            members = np.flatnonzero(group == g)
            stay = members[is_stay[members]]
            ref[stay[0] if len(stay) else members[0]] = True
    else:
        lvl_group = np.zeros(L, dtype=np.int64)
        lvl_group[code] = groups
        ref = np.zeros(L, dtype=bool)
        for g in np.unique(lvl_group):
            ref[np.flatnonzero(lvl_group == g)[0]] = True
    chosen = np.bincount(code, weights=data.chosen, minlength=L)
    present = np.bincount(code, minlength=L)
    if spec.fe != "bct":
        bad = np.flatnonzero((chosen == 0) | (chosen == present))
        if len(bad):
            names = [label(levels[k]) for k in bad]
            raise SeparationError(
                f"fixed effects not identified (level never chosen, or chosen whenever available): "
                f"{names[:10]}", names)
    col_of = -np.ones(L, dtype=np.int64)
    free = np.flatnonzero(~ref)
    col_of[free] = np.arange(len(free))
    rows = np.flatnonzero(col_of[code] >= 0)
    block = sparse.csr_matrix((np.ones(len(rows)), (rows, col_of[code][rows])),
                              shape=(data.n_rows, len(free)))
    names = [label(levels[k]) for k in free]
    ref_names = [label(levels[k]) for k in np.flatnonzero(ref)]
    return block, names, ref_names


def build_design(data, spec, world=None, covariates=None):
    """Stack structural covariates, FE dummies and the fixed offset.

    Returns a ``Design`` whose ``data`` attribute is the (possibly filtered)
    choice data the matrix refers to.
    """
    dropped_rows = dropped_obs = 0
    if spec.rd is not None:
        n0r, n0o = data.n_rows, data.n_obs
        data = _rd_filter(data, spec, world, covariates)
        dropped_rows += n0r - data.n_rows
        dropped_obs += n0o - data.n_obs
    if spec.fe == "bct" or (spec.fe != "none" and spec.separation == "drop"):
        data, dr, do = _drop_unidentified(data, spec.fe)
        dropped_rows += dr
        dropped_obs += do
        if dr or do:
            log.info("%s: dropped %d alternatives and %d choice problems without identifying variation",
                     spec.fe, dr, do)
    if data.n_obs == 0:
        raise ValidationError("no choice problems left to estimate")
    n = data.log_friends
    cols = feature_columns(n, data.same_city, data.log_distance, data.out_of_state, interactions=True)
    needs_world = spec.include_wage or spec.wage_offset is not None or spec.heterogeneity or spec.rd
    if needs_world and world is None:
        raise ValidationError("this specification needs the world (wages or city covariates)")
    for name in spec.structural_names():
        if name in cols:
            continue
        if name == "log_wage":
            cols[name] = np.log(world.wage)[data.city]
        elif name == "log_friends_x_running":
            x = city_covariate(spec.rd.covariate, world, covariates)
            cols[name] = n * (x - spec.rd.cutoff)[data.city]
        elif name == "log_friends_x_above":
            x = city_covariate(spec.rd.covariate, world, covariates)
            cols[name] = n * (x >= spec.rd.cutoff)[data.city]
        elif name.startswith("log_friends_x_"):
            x = city_covariate(name[len("log_friends_x_"):], world, covariates)
            cols[name] = n * x[data.city]
        elif name == CF_COLUMN:
            if CF_COLUMN not in data.extra:
                raise ValidationError("control function requested but the data carry no cf_residual column")
            cols[name] = data.extra[CF_COLUMN]
    names = spec.structural_names()
    dense = np.column_stack([np.asarray(cols[k], dtype=float) for k in names]) if names \
        else np.empty((data.n_rows, 0))
    blocks = [sparse.csr_matrix(dense)]
    fe_names, ref_names = [], []
    if spec.fe != "none":
        block, fe_names, ref_names = _fe_columns(data, spec)
        blocks.append(block)
    X = sparse.hstack(blocks, format="csr")
    offset = np.zeros(data.n_rows)
    if spec.sampling_correction:
        offset -= data.inclusion_log_prob
    if spec.wage_offset is not None:
        offset += spec.wage_offset * np.log(world.wage)[data.city]
    if spec.amenity_offset is not None:
        if len(spec.amenity_offset) != len(data.city_ids):
            raise ValidationError("amenity offset must have one entry per city")
        offset += spec.amenity_offset[data.city]
    return Design(X=X, names=tuple(names) + tuple(fe_names), offset=offset, n_structural=len(names),
                  data=data, dropped_rows=dropped_rows, dropped_obs=dropped_obs,
                  fe_levels={"reference": ref_names})


class LogitProblem:
    """Log-likelihood, gradient and Hessian of a conditional logit.

    ``X`` is the (rows x params) design, ``offset`` a fixed per-row utility
    shift, ``offsets`` the observation boundaries and ``chosen`` the 0/1
    choice indicator per row.
    """

    def __init__(self, X, offset, offsets, chosen):
        self.X = sparse.csr_matrix(X)
        self.XT = self.X.T.tocsr()
        self.offset = np.asarray(offset, dtype=float)
        self.offsets = np.asarray(offsets, dtype=np.int64)
        self.starts = self.offsets[:-1]
        self.y = np.asarray(chosen, dtype=float)
        self.n_obs = len(self.starts)
        self.row_obs = np.repeat(np.arange(self.n_obs), np.diff(self.offsets))
        n_rows = self.X.shape[0]
        self._ind = sparse.csr_matrix((np.ones(n_rows), (self.row_obs, np.arange(n_rows))),
                                      shape=(self.n_obs, n_rows))

    @classmethod
    def from_design(cls, design):
        return cls(design.X, design.offset, design.data.offsets, design.data.chosen)

    @property
    def n_params(self):
        return self.X.shape[1]

    def utilities(self, b):
        return self.X @ np.asarray(b, dtype=float) + self.offset

    def _lse(self, V):
        m = np.maximum.reduceat(V, self.starts)
        e = np.exp(V - m[self.row_obs])
        return m + np.log(np.add.reduceat(e, self.starts))

    def probabilities(self, b):
        V = self.utilities(b)
        return np.exp(V - self._lse(V)[self.row_obs])

    def obs_loglik(self, b):
        V = self.utilities(b)
        return np.add.reduceat(V * self.y, self.starts) - self._lse(V)

    def loglik(self, b):
        return float(np.sum(self.obs_loglik(b)))

    def gradient(self, b):
        return self.XT @ (self.y - self.probabilities(b))

    def loglik_and_gradient(self, b):
        V = self.utilities(b)
        lse = self._lse(V)
        p = np.exp(V - lse[self.row_obs])
        ll = float(np.sum(np.add.reduceat(V * self.y, self.starts) - lse))
        return ll, self.XT @ (self.y - p)

    def hessian(self, b, p=None):
        """Sparse Hessian ``-X'diag(p)X + sum_obs (X_g'p_g)(X_g'p_g)'``."""
        p = self.probabilities(b) if p is None else p
        XP = self.X.multiply(p[:, None]).tocsr()
        A = self._ind @ XP
        H = -(self.XT @ XP) + A.T @ A
        return sparse.csr_matrix(H)

    def scores(self, b):
        """Per-observation score contributions as a sparse (obs x params) matrix."""
        r = self.y - self.probabilities(b)
        return sparse.csr_matrix(self._ind @ self.X.multiply(r[:, None]).tocsr())


def systematic_utility(params, observation, xi=None, residual_coef=0.0, interactions=True,
                       sampling_correction=True):
    """Systematic utility of every alternative of one ``ChoiceObservation``.

    ``params`` is a ``ParameterSet``; ``xi`` an optional per-alternative fixed
    effect (destination preference) vector.  The sampling correction enters
    as ``-inclusion_log_prob`` with coefficient one.
    """
    o = observation
    V = moving_utility(params, o.log_friends, o.same_city, o.log_distance, o.out_of_state,
                       interactions=interactions)
    if xi is not None:
        V = V + np.asarray(xi, dtype=float)
    if sampling_correction:
        V = V - o.inclusion_log_prob
    if residual_coef:
        V = V + residual_coef * o.extra[CF_COLUMN]
    return V

"""Choice sets in long format with importance-sampled alternatives.

Each agent-year choice keeps its origin and every city holding at least one
friend in the previous year, plus a simple random sample of the remaining
cities.  When the chosen city would otherwise be missing it is added and one
fewer city is sampled, so the set always contains the choice.  Under this
scheme the probability of drawing a particular set given any sampled member
is the same, and the conditional logit over the set is consistent once each
sampled alternative's utility is shifted by ``log(m / K)`` for ``K`` draws out
of ``m`` eligible cities.  ``inclusion_log_prob`` stores ``log(K / m)``; the
model subtracts it.
"""
from dataclasses import dataclass, field, replace
import logging

import numpy as np

from .._rng import stream
from ..exceptions import ValidationError
from ..utility import log_distance

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ChoiceObservation:
    """One agent-year choice problem (a view into ``ChoiceData``)."""

    agent_id: int
    year: int
    origin: int
    chosen: int
    city_ids: np.ndarray
    log_friends: np.ndarray
    same_city: np.ndarray
    log_distance: np.ndarray
    out_of_state: np.ndarray
    inclusion_log_prob: np.ndarray
    extra: dict = field(default_factory=dict)

    @property
    def cluster(self):
        return (self.agent_id, self.year)


@dataclass(frozen=True, eq=False)
class ChoiceData:
    """Stacked alternatives of many choice problems.

    Observation ``k`` owns rows ``offsets[k]:offsets[k + 1]``.  City columns
    hold positions in the world's city order, not ids.  ``extra`` carries
    additional per-row columns such as control-function residuals.
    """

    agent_id: np.ndarray
    year: np.ndarray
    origin: np.ndarray
    offsets: np.ndarray
    city: np.ndarray
    log_friends: np.ndarray
    same_city: np.ndarray
    log_distance: np.ndarray
    out_of_state: np.ndarray
    inclusion_log_prob: np.ndarray
    chosen: np.ndarray
    city_ids: np.ndarray
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        n_rows = len(self.city)
        if self.offsets[0] != 0 or self.offsets[-1] != n_rows or np.any(np.diff(self.offsets) < 1):
            raise ValidationError("offsets must start at 0, end at the row count and be increasing")
        for name in ("log_friends", "same_city", "log_distance", "out_of_state",
                     "inclusion_log_prob", "chosen"):
            if len(getattr(self, name)) != n_rows:
                raise ValidationError(f"column {name} has the wrong length")
        for name, col in self.extra.items():
            if len(col) != n_rows:
                raise ValidationError(f"extra column {name} has the wrong length")
        if np.any(np.add.reduceat(self.chosen.astype(np.int64), self.offsets[:-1]) != 1):
            raise ValidationError("every observation must have exactly one chosen alternative")
        if np.any(self.inclusion_log_prob > 0):
            raise ValidationError("inclusion_log_prob must be <= 0")
        if np.any(self.same_city & (self.log_distance != 0)):
            raise ValidationError("log_distance must be 0 for the origin alternative")

    @property
    def n_obs(self):
        return len(self.agent_id)

    @property
    def n_rows(self):
        return len(self.city)

    @property
    def sizes(self):
        return np.diff(self.offsets)

    @property
    def row_obs(self):
        """Observation index of every row."""
        return np.repeat(np.arange(self.n_obs), self.sizes)

    @property
    def chosen_city(self):
        return self.city[self.chosen]

    @property
    def moved(self):
        return self.chosen_city != self.origin

    def observation(self, k):
        s = slice(self.offsets[k], self.offsets[k + 1])
        ch = self.city[s][self.chosen[s]][0]
        return ChoiceObservation(
            agent_id=int(self.agent_id[k]), year=int(self.year[k]),
            origin=int(self.city_ids[self.origin[k]]), chosen=int(self.city_ids[ch]),
            city_ids=self.city_ids[self.city[s]], log_friends=self.log_friends[s],
            same_city=self.same_city[s], log_distance=self.log_distance[s],
            out_of_state=self.out_of_state[s], inclusion_log_prob=self.inclusion_log_prob[s],
            extra={k2: v[s] for k2, v in self.extra.items()})

    def __iter__(self):
        return (self.observation(k) for k in range(self.n_obs))

    def with_column(self, name, values):
        values = np.asarray(values, dtype=float)
        if len(values) != self.n_rows:
            raise ValidationError(f"column {name} needs {self.n_rows} rows, got {len(values)}")
        return replace(self, extra={**self.extra, name: values})

    def select_rows(self, keep):
        """Keep a subset of rows; observations left without their choice or
        with a single alternative are dropped.

        Returns ``(ChoiceData, kept observation indices)``.
        """
        keep = np.asarray(keep, dtype=bool).copy()
        obs = self.row_obs
        counts = np.bincount(obs[keep], minlength=self.n_obs)
        has_choice = np.bincount(obs[keep & self.chosen], minlength=self.n_obs) > 0
        good = (counts >= 2) & has_choice
        keep &= good[obs]
        return self._take(keep, np.flatnonzero(good)), np.flatnonzero(good)

    def select_obs(self, obs_mask):
        obs_mask = np.asarray(obs_mask, dtype=bool)
        return self._take(obs_mask[self.row_obs], np.flatnonzero(obs_mask))

    def _take(self, row_keep, obs_idx):
        sizes = np.bincount(self.row_obs[row_keep], minlength=self.n_obs)[obs_idx]
        offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64)
        cols = {name: getattr(self, name)[row_keep] for name in
                ("city", "log_friends", "same_city", "log_distance", "out_of_state",
                 "inclusion_log_prob", "chosen")}
        return ChoiceData(agent_id=self.agent_id[obs_idx], year=self.year[obs_idx],
                          origin=self.origin[obs_idx], offsets=offsets, city_ids=self.city_ids,
                          extra={k: v[row_keep] for k, v in self.extra.items()}, **cols)

    def cluster_keys(self):
        return np.column_stack([self.agent_id, self.year])

    def row_frame(self):
        """Per-row arrays keyed by column name (agent, year and city ids included)."""
        obs = self.row_obs
        out = {"agent_id": self.agent_id[obs], "year": self.year[obs],
               "city_id": self.city_ids[self.city], "chosen": self.chosen.astype(np.int64),
               "log_friends": self.log_friends, "same_city": self.same_city.astype(np.int64),
               "log_distance": self.log_distance, "out_of_state": self.out_of_state.astype(np.int64),
               "inclusion_log_prob": self.inclusion_log_prob}
        out.update(self.extra)
        return out


def _sample_set(n_cities, origin, friend_cols, chosen, n_extra, rng):
    """Alternatives (sorted positions) and their inclusion log-probabilities."""
    det = np.zeros(n_cities, dtype=bool)
    det[origin] = True
    det[friend_cols] = True
    remaining = np.flatnonzero(~det)
    m = len(remaining)
    if n_extra is None:
        members = np.arange(n_cities)
        return members, np.zeros(n_cities), False
    k = min(n_extra, m)
    clamped = n_extra > m
    if det[chosen]:
        picks = rng.choice(remaining, size=k, replace=False) if k else np.empty(0, dtype=np.int64)
    else:
        others = remaining[remaining != chosen]
        extra = rng.choice(others, size=k - 1, replace=False) if k > 1 else np.empty(0, dtype=np.int64)
        picks = np.concatenate([[chosen], extra])
    sampled = np.zeros(n_cities, dtype=bool)
    sampled[picks] = True
    members = np.flatnonzero(det | sampled)
    lp = np.where(sampled[members], np.log(k / m) if k else 0.0, 0.0)
    return members, lp, clamped


def build_choice_sets(panel, networks, world, n_extra=10, seed=0, years=None):
    """Assemble choice problems for every agent and every year after the first.

    Parameters
    ----------
    panel : AgentPanel
    networks : NetworkPanel
        Must hold the year before each choice year.
    world : World
    n_extra : int or None
        Number of sampled non-friend cities per problem; clamped to the
        number available.  ``None`` uses every city with no correction.
    seed : int
        Master seed; draws are keyed by (agent, year).
    years : iterable of int, optional
        Choice years; defaults to every panel year after the first.

    Returns
    -------
    ChoiceData
    """
    if n_extra is not None and n_extra < 0:
        raise ValidationError("n_extra must be >= 0")
    if not np.array_equal(networks.city_ids, world.ids):
        raise ValidationError("network columns are not aligned with the world's cities")
    if not np.array_equal(networks.agent_ids, panel.agent_ids):
        raise ValidationError("network rows are not aligned with the panel's agents")
    years = panel.years[1:] if years is None else np.asarray(list(years), dtype=np.int64)
    J = len(world)
    dist = world.distances()
    state = world.state
    parts = {k: [] for k in ("agent", "year", "origin", "size", "city", "lf", "lp", "chosen")}
    n_clamped = 0
    for t in years:
        t = int(t)
        prev_res = world.positions(panel.residence_at(t - 1))
        cur_res = world.positions(panel.residence_at(t))
        F = networks.at(t - 1)
        indptr, indices, data = F.indptr, F.indices, F.data
        for k, aid in enumerate(panel.agent_ids):
            cols = indices[indptr[k]:indptr[k + 1]]
            rng = stream(seed, "choice_set", aid, t)
            members, lp, clamped = _sample_set(J, prev_res[k], cols, cur_res[k], n_extra, rng)
            n_clamped += clamped
            friends = np.zeros(J)
            friends[cols] = data[indptr[k]:indptr[k + 1]]
            parts["agent"].append(aid)
            parts["year"].append(t)
            parts["origin"].append(prev_res[k])
            parts["size"].append(len(members))
            parts["city"].append(members)
            parts["lf"].append(np.log1p(friends[members]))
            parts["lp"].append(lp)
            parts["chosen"].append(members == cur_res[k])
    if n_clamped:
        log.info("n_extra=%s exceeds the eligible cities in %d choice problems; used all of them",
                 n_extra, n_clamped)
    if not parts["agent"]:
        raise ValidationError("no choice problems: the panel needs at least two years")
    city = np.concatenate(parts["city"]).astype(np.int64)
    origin = np.asarray(parts["origin"], dtype=np.int64)
    sizes = np.asarray(parts["size"], dtype=np.int64)
    row_origin = np.repeat(origin, sizes)
    same = city == row_origin
    return ChoiceData(
        agent_id=np.asarray(parts["agent"], dtype=np.int64),
        year=np.asarray(parts["year"], dtype=np.int64),
        origin=origin,
        offsets=np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64),
        city=city,
        log_friends=np.concatenate(parts["lf"]),
        same_city=same,
        log_distance=log_distance(dist[row_origin, city], same),
        out_of_state=state[row_origin] != state[city],
        inclusion_log_prob=np.concatenate(parts["lp"]),
        chosen=np.concatenate(parts["chosen"]),
        city_ids=world.ids.copy())

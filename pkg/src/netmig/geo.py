"""Cities, great-circle distances, wage quartiles and transition matrices."""
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .exceptions import ValidationError

EARTH_RADIUS_KM = 6371.0
# dense distance matrices are cached up to this many cities
DENSE_DISTANCE_LIMIT = 10_000


def _check_coords(lat, lon):
    lat = np.asarray(lat, dtype=float)
    lon = np.asarray(lon, dtype=float)
    if not (np.all(np.isfinite(lat)) and np.all(np.isfinite(lon))):
        raise ValidationError("coordinates must be finite")
    if np.any(np.abs(lat) > 90.0):
        raise ValidationError(f"latitude out of [-90, 90]: {lat[np.abs(lat) > 90.0].ravel()[:3]}")
    if np.any(np.abs(lon) > 180.0):
        raise ValidationError(f"longitude out of [-180, 180]: {lon[np.abs(lon) > 180.0].ravel()[:3]}")
    return lat, lon


def haversine_km(a, b):
    """Great-circle distance in km between two ``(lat, lon)`` pairs.

    Accepts scalars or broadcastable arrays for each coordinate.

    >>> round(haversine_km((0.0, 0.0), (0.0, 180.0)), 2)
    20015.09
    """
    lat1, lon1 = _check_coords(a[0], a[1])
    lat2, lon2 = _check_coords(b[0], b[1])
    p1, p2 = np.radians(lat1), np.radians(lat2)
    dphi = p2 - p1
    dlam = np.radians(lon2 - lon1)
    h = np.sin(dphi / 2.0) ** 2 + np.cos(p1) * np.cos(p2) * np.sin(dlam / 2.0) ** 2
    d = 2.0 * EARTH_RADIUS_KM * np.arcsin(np.sqrt(np.clip(h, 0.0, 1.0)))
    return float(d) if d.ndim == 0 else d


def distance_matrix_km(lat, lon):
    """Pairwise haversine distances; exactly symmetric with a zero diagonal."""
    lat, lon = _check_coords(lat, lon)
    d = haversine_km((lat[:, None], lon[:, None]), (lat[None, :], lon[None, :]))
    d = np.atleast_2d(d)
    d = np.triu(d, 1)
    return d + d.T


@dataclass(frozen=True)
class City:
    city_id: int
    lat: float
    lon: float
    state_id: int
    district_id: int
    avg_wage: float
    population: float = 0.0
    amenity: float | None = None
    name: str = ""

    def __post_init__(self):
        _check_coords(self.lat, self.lon)
        if not self.avg_wage > 0:
            raise ValidationError(f"city {self.city_id}: avg_wage must be > 0, got {self.avg_wage}")
        if self.population < 0:
            raise ValidationError(f"city {self.city_id}: population must be >= 0")


@dataclass(frozen=True, eq=False)
class World:
    """An immutable collection of cities with cached pairwise distances.

    Cities are kept in ascending ``city_id`` order; ``index`` maps an id to its
    position, which is what every array in the package is aligned to.
    """

    cities: tuple
    _index: dict = field(init=False, repr=False, compare=False)

    def __init__(self, cities):
        cities = tuple(sorted(cities, key=lambda c: c.city_id))
        if len(cities) < 2:
            raise ValidationError("a World needs at least 2 cities")
        ids = [c.city_id for c in cities]
        if len(set(ids)) != len(ids):
            dup = sorted({i for i in ids if ids.count(i) > 1})
            raise ValidationError(f"duplicate city_id: {dup[:5]}")
        district_state = {}
        for c in cities:
            s = district_state.setdefault(c.district_id, c.state_id)
            if s != c.state_id:
                raise ValidationError(
                    f"district {c.district_id} belongs to states {s} and {c.state_id}")
        object.__setattr__(self, "cities", cities)
        object.__setattr__(self, "_index", {cid: k for k, cid in enumerate(ids)})

    def __len__(self):
        return len(self.cities)

    def __eq__(self, other):
        return isinstance(other, World) and self.cities == other.cities

    def __hash__(self):
        return hash(self.cities)

    def index(self, city_id):
        try:
            return self._index[int(city_id)]
        except KeyError:
            raise ValidationError(f"unknown city_id {city_id}") from None

    def positions(self, city_ids):
        return np.fromiter((self.index(c) for c in city_ids), dtype=np.int64,
                           count=len(city_ids))

    def __contains__(self, city_id):
        return int(city_id) in self._index

    @cached_property
    def ids(self):
        return np.array([c.city_id for c in self.cities], dtype=np.int64)

    @cached_property
    def lat(self):
        return np.array([c.lat for c in self.cities])

    @cached_property
    def lon(self):
        return np.array([c.lon for c in self.cities])

    @cached_property
    def state(self):
        return np.array([c.state_id for c in self.cities], dtype=np.int64)

    @cached_property
    def district(self):
        return np.array([c.district_id for c in self.cities], dtype=np.int64)

    @cached_property
    def wage(self):
        return np.array([c.avg_wage for c in self.cities])

    @cached_property
    def population(self):
        return np.array([c.population for c in self.cities])

    @cached_property
    def amenity(self):
        """Amenity vector, zeros where a city has none recorded."""
        return np.array([0.0 if c.amenity is None else c.amenity for c in self.cities])

    @cached_property
    def _dense_distances(self):
        return distance_matrix_km(self.lat, self.lon)

    def distances(self):
        """Full distance matrix (km), cached for worlds up to 10,000 cities."""
        if len(self) <= DENSE_DISTANCE_LIMIT:
            return self._dense_distances
        return distance_matrix_km(self.lat, self.lon)

    def distance(self, i, j):
        """Distance between the cities at positions ``i`` and ``j``."""
        if len(self) <= DENSE_DISTANCE_LIMIT:
            return self._dense_distances[i, j]
        return haversine_km((self.lat[i], self.lon[i]), (self.lat[j], self.lon[j]))

    def replace(self, **arrays):
        """Return a new World with per-city fields overridden from arrays."""
        cities = []
        for k, c in enumerate(self.cities):
            kw = {name: (values[k].item() if hasattr(values[k], "item") else values[k])
                  for name, values in arrays.items()}
            cities.append(City(**{**c.__dict__, **kw}))
        return World(cities)


@dataclass(frozen=True, eq=False)
class WageQuartiles:
    """City-level wage quartiles; a wage equal to a breakpoint falls below it."""

    breakpoints: np.ndarray
    assignment: dict

    def __eq__(self, other):
        return (isinstance(other, WageQuartiles)
                and np.array_equal(self.breakpoints, other.breakpoints)
                and self.assignment == other.assignment)

    def of(self, city_ids):
        return np.array([self.assignment[int(c)] for c in np.atleast_1d(city_ids)])


def wage_quartiles(world):
    """Unweighted quartiles of ``avg_wage`` across the cities of ``world``."""
    cities = world.cities if isinstance(world, World) else tuple(world)
    if len(cities) == 0:
        raise ValidationError("cannot compute wage quartiles of an empty world")
    wages = np.array([c.avg_wage for c in cities], dtype=float)
    breaks = np.percentile(wages, [25.0, 50.0, 75.0])
    q = np.searchsorted(breaks, wages, side="left") + 1
    return WageQuartiles(breakpoints=breaks,
                         assignment={c.city_id: int(k) for c, k in zip(cities, q)})


@dataclass(frozen=True, eq=False)
class TransitionMatrix:
    matrix: np.ndarray
    populated: np.ndarray
    counts: np.ndarray


def transition_matrix(panel, quartiles, t0, t1):
    """Row-stochastic 4x4 matrix of P(quartile at ``t1`` | quartile at ``t0``).

    Rows without any agent are left at zero and marked ``populated=False``.
    """
    r0 = panel.residence_at(t0)
    r1 = panel.residence_at(t1)
    q0 = quartiles.of(r0) - 1
    q1 = quartiles.of(r1) - 1
    counts = np.zeros((4, 4))
    np.add.at(counts, (q0, q1), 1.0)
    mass = counts.sum(axis=1)
    populated = mass > 0
    out = np.zeros_like(counts)
    out[populated] = counts[populated] / mass[populated, None]
    return TransitionMatrix(matrix=out, populated=populated, counts=counts)

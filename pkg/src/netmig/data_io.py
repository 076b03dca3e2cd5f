"""Tabular inputs and outputs: typed panels, validated CSV loaders and writers.

Every loader checks the exact header, parses each field, and enforces
referential integrity against the :class:`~netmig.geo.World`.  Problems are
reported as :class:`~netmig.exceptions.SchemaError` carrying the data row
number (1-based, header excluded) and the offending value; rows are never
silently dropped.
"""
import csv
from dataclasses import dataclass
import math
import numbers
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .exceptions import SchemaError, ValidationError
from .geo import City, World

SCHEMAS = {
    "cities": ("city_id", "name", "lat", "lon", "state_id", "district_id",
               "avg_wage_usd", "population"),
    "locations": ("agent_id", "year", "city_id"),
    "agents": ("agent_id", "birth_year", "college_flag", "device_price_usd",
               "hometown_city_id"),
    "networks": ("agent_id", "year", "city_id", "friend_count"),
    "weather": ("city_id", "year", "rainfall_mm", "hot_days"),
    "industries": ("district_id", "industry_code", "year", "employment", "avg_wage_usd"),
    "survey": ("respondent_id", "current_city_id", "dream_city_id"),
    "city_covariates": ("city_id", "name", "value"),
    "amenities": ("city_id", "amenity", "se"),
}

MIN_WEATHER_WINDOW = 10


# --------------------------------------------------------------------------- #
# formatting and parsing helpers
# --------------------------------------------------------------------------- #

def format_value(v):
    """Render a scalar so that ``float(text)`` round-trips bit for bit."""
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, numbers.Integral):
        return str(int(v))
    if isinstance(v, numbers.Real):
        v = float(v)
        if math.isnan(v):
            return ""
        return format(v, ".17g")
    return "" if v is None else str(v)


def write_table(path, columns):
    """Write named columns to CSV in the given column order.

    Parameters
    ----------
    path : str or Path
    columns : mapping of str to sequence
        All sequences must have the same length.
    """
    names = list(columns)
    data = [list(columns[n]) for n in names]
    lengths = {len(c) for c in data}
    if len(lengths) > 1:
        raise ValidationError(f"columns have unequal lengths: {dict(zip(names, map(len, data)))}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(names)
        for row in zip(*data):
            w.writerow([format_value(v) for v in row])


def _read(path, kind):
    header = SCHEMAS[kind]
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            found = next(reader)
        except StopIteration:
            raise SchemaError("file is empty; expected header " + ",".join(header), path) from None
        if tuple(h.strip() for h in found) != header:
            missing = [h for h in header if h not in found]
            msg = f"header mismatch: expected {','.join(header)}, got {','.join(found)}"
            if missing:
                msg += f" (missing column(s): {', '.join(missing)})"
            raise SchemaError(msg, path)
        rows = []
        for k, row in enumerate(reader, start=1):
            if not row:
                continue
            if len(row) != len(header):
                raise SchemaError(f"expected {len(header)} fields, got {len(row)}", path, k, row)
            rows.append((k, row))
    return path, header, rows


def _parse(rows, header, path, spec):
    """Parse selected columns.  ``spec`` maps column name to a converter."""
    out = {name: [] for name in spec}
    pos = {name: header.index(name) for name in spec}
    for k, row in rows:
        for name, conv in spec.items():
            text = row[pos[name]].strip()
            try:
                val = conv(text)
            except (ValueError, TypeError):
                raise SchemaError(f"column {name!r}: cannot parse {text!r}", path, k, text) from None
            out[name].append(val)
    return out


def _int(text):
    v = float(text)
    if not v.is_integer():
        raise ValueError(text)
    return int(v)


def _float(text):
    v = float(text)
    if not math.isfinite(v):
        raise ValueError(text)
    return v


def _nonneg(conv):
    def f(text):
        v = conv(text)
        if v < 0:
            raise ValueError(text)
        return v
    return f


def _flag(text):
    v = _int(text)
    if v not in (0, 1):
        raise ValueError(text)
    return v


def _check_unique(keys, rows, path, what):
    seen = {}
    for key, (k, _) in zip(keys, rows):
        if key in seen:
            raise SchemaError(f"duplicate {what} {key} (first at row {seen[key]})", path, k, key)
        seen[key] = k


def _check_city(city_ids, rows, path, world, column="city_id"):
    for cid, (k, _) in zip(city_ids, rows):
        if cid not in world:
            raise SchemaError(f"{column} {cid} does not exist in the world", path, k, cid)


# --------------------------------------------------------------------------- #
# typed containers
# --------------------------------------------------------------------------- #

@dataclass(frozen=True, eq=False)
class AgentPanel:
    """Residence of every agent in every year plus per-agent demographics.

    ``residence`` is an ``(n_agents, n_years)`` array of city ids aligned to
    ``agent_ids`` (ascending) and ``years`` (consecutive).
    """

    agent_ids: np.ndarray
    years: np.ndarray
    residence: np.ndarray
    birth_year: np.ndarray
    college_flag: np.ndarray
    device_price: np.ndarray
    hometown: np.ndarray

    def __post_init__(self):
        n, t = len(self.agent_ids), len(self.years)
        if self.residence.shape != (n, t):
            raise ValidationError(f"residence shape {self.residence.shape} != ({n}, {t})")
        if t > 1 and np.any(np.diff(self.years) != 1):
            raise ValidationError("years must be consecutive")
        if n and np.any(np.diff(self.agent_ids) <= 0):
            raise ValidationError("agent_ids must be strictly increasing")
        if n and t and np.any(self.hometown != self.residence[:, 0]):
            bad = self.agent_ids[self.hometown != self.residence[:, 0]][:5]
            raise ValidationError(f"hometown differs from first-year residence for agents {list(bad)}")

    @property
    def n_agents(self):
        return len(self.agent_ids)

    def year_index(self, year):
        k = int(year) - int(self.years[0]) if len(self.years) else -1
        if not 0 <= k < len(self.years):
            raise ValidationError(f"year {year} outside panel years {list(self.years)}")
        return k

    def residence_at(self, year):
        return self.residence[:, self.year_index(year)]

    def agent_index(self, agent_id):
        k = int(np.searchsorted(self.agent_ids, agent_id))
        if k >= len(self.agent_ids) or self.agent_ids[k] != agent_id:
            raise ValidationError(f"unknown agent_id {agent_id}")
        return k

    def __eq__(self, other):
        return isinstance(other, AgentPanel) and all(
            np.array_equal(getattr(self, f), getattr(other, f)) for f in self.__dataclass_fields__)


@dataclass(frozen=True, eq=False)
class NetworkPanel:
    """Sparse friend counts per (agent, year, city); absent entries are zero.

    ``counts[year]`` is a CSR matrix of shape ``(n_agents, n_cities)`` with rows
    aligned to ``agent_ids`` and columns to ``city_ids`` (the world order).
    """

    agent_ids: np.ndarray
    city_ids: np.ndarray
    counts: dict

    def __post_init__(self):
        shape = (len(self.agent_ids), len(self.city_ids))
        for y, m in self.counts.items():
            if m.shape != shape:
                raise ValidationError(f"network matrix for {y} has shape {m.shape}, expected {shape}")
            if m.nnz and m.data.min() < 1:
                raise ValidationError("stored friend counts must be >= 1")

    @classmethod
    def from_dense(cls, agent_ids, city_ids, dense_by_year):
        counts = {}
        for y, d in dense_by_year.items():
            m = sp.csr_matrix(np.asarray(d, dtype=np.int64))
            m.eliminate_zeros()
            m.sort_indices()
            counts[int(y)] = m
        return cls(np.asarray(agent_ids, dtype=np.int64), np.asarray(city_ids, dtype=np.int64), counts)

    @property
    def years(self):
        return np.array(sorted(self.counts), dtype=np.int64)

    def at(self, year):
        try:
            return self.counts[int(year)]
        except KeyError:
            raise ValidationError(f"no network data for year {year}") from None

    def dense(self, year):
        return self.at(year).toarray()

    def total(self, year):
        return np.asarray(self.at(year).sum(axis=1)).ravel()

    def rows(self):
        """Yield ``(agent_id, year, city_id, count)`` sorted by agent, year, city."""
        items = []
        for y in self.years:
            coo = self.counts[y].tocoo()
            items.append((self.agent_ids[coo.row], np.full(coo.nnz, y), self.city_ids[coo.col], coo.data))
        if not items:
            return
        a, y, c, n = (np.concatenate(z) for z in zip(*items))
        order = np.lexsort((c, y, a))
        for k in order:
            yield int(a[k]), int(y[k]), int(c[k]), int(n[k])

    def __eq__(self, other):
        if not isinstance(other, NetworkPanel):
            return False
        if not (np.array_equal(self.agent_ids, other.agent_ids)
                and np.array_equal(self.city_ids, other.city_ids)
                and set(self.counts) == set(other.counts)):
            return False
        return all((self.counts[y] != other.counts[y]).nnz == 0 for y in self.counts)


@dataclass(frozen=True, eq=False)
class WeatherPanel:
    """Annual rainfall and hot-day counts for every city and year.

    Arrays are ``(n_cities, n_years)``.  Percentile thresholds are computed over
    ``window`` (inclusive year range), the full span by default.
    """

    city_ids: np.ndarray
    years: np.ndarray
    rainfall: np.ndarray
    hot_days: np.ndarray
    window: tuple = None

    def __post_init__(self):
        shape = (len(self.city_ids), len(self.years))
        if self.rainfall.shape != shape or self.hot_days.shape != shape:
            raise ValidationError("weather arrays must be (n_cities, n_years)")
        if self.window is None and len(self.years):
            object.__setattr__(self, "window", (int(self.years[0]), int(self.years[-1])))

    def window_mask(self):
        lo, hi = self.window
        return (self.years >= lo) & (self.years <= hi)

    def __eq__(self, other):
        return (isinstance(other, WeatherPanel) and self.window == other.window
                and all(np.array_equal(getattr(self, f), getattr(other, f))
                        for f in ("city_ids", "years", "rainfall", "hot_days")))


@dataclass(frozen=True, eq=False)
class IndustryPanel:
    """District-by-industry employment and wages; NaN marks an absent row.

    Arrays are ``(n_districts, n_industries, n_years)``.
    """

    district_ids: np.ndarray
    industries: tuple
    years: np.ndarray
    employment: np.ndarray
    wage: np.ndarray

    @property
    def present(self):
        return ~np.isnan(self.employment)

    def __eq__(self, other):
        return (isinstance(other, IndustryPanel) and self.industries == other.industries
                and np.array_equal(self.district_ids, other.district_ids)
                and np.array_equal(self.years, other.years)
                and np.array_equal(self.employment, other.employment, equal_nan=True)
                and np.array_equal(self.wage, other.wage, equal_nan=True))


@dataclass(frozen=True, eq=False)
class SurveyChoices:
    respondent_id: np.ndarray
    current_city: np.ndarray
    dream_city: np.ndarray

    def __len__(self):
        return len(self.respondent_id)

    def __eq__(self, other):
        return isinstance(other, SurveyChoices) and all(
            np.array_equal(getattr(self, f), getattr(other, f))
            for f in ("respondent_id", "current_city", "dream_city"))


@dataclass(frozen=True, eq=False)
class CityCovariates:
    """Named per-city covariates, e.g. bank branches or a policy index."""

    values: dict  # name -> {city_id: value}

    def names(self):
        return sorted(self.values)

    def vector(self, name, world):
        """Covariate aligned to ``world`` order; raises if a city is missing."""
        try:
            table = self.values[name]
        except KeyError:
            raise ValidationError(f"unknown city covariate {name!r}; have {self.names()}") from None
        missing = [int(c) for c in world.ids if int(c) not in table]
        if missing:
            raise ValidationError(f"covariate {name!r} missing for cities {missing[:5]}")
        return np.array([table[int(c)] for c in world.ids], dtype=float)

    def __eq__(self, other):
        return isinstance(other, CityCovariates) and self.values == other.values


# --------------------------------------------------------------------------- #
# loaders
# --------------------------------------------------------------------------- #

def load_world(path):
    path, header, rows = _read(path, "cities")
    if not rows:
        raise SchemaError("a world needs at least 2 cities; file has no data rows", path)
    cols = _parse(rows, header, path, {
        "city_id": _int, "name": str, "lat": _float, "lon": _float, "state_id": _int,
        "district_id": _int, "avg_wage_usd": _float, "population": _nonneg(_float)})
    _check_unique(cols["city_id"], rows, path, "city_id")
    cities = []
    for k, (rown, _) in enumerate(rows):
        lat, lon = cols["lat"][k], cols["lon"][k]
        if not -90 <= lat <= 90:
            raise SchemaError(f"lat {lat} outside [-90, 90]", path, rown, lat)
        if not -180 <= lon <= 180:
            raise SchemaError(f"lon {lon} outside [-180, 180]", path, rown, lon)
        if not cols["avg_wage_usd"][k] > 0:
            raise SchemaError("avg_wage_usd must be > 0", path, rown, cols["avg_wage_usd"][k])
        cities.append(City(city_id=cols["city_id"][k], name=cols["name"][k], lat=lat, lon=lon,
                           state_id=cols["state_id"][k], district_id=cols["district_id"][k],
                           avg_wage=cols["avg_wage_usd"][k], population=cols["population"][k]))
    try:
        return World(cities)
    except ValidationError as exc:
        raise SchemaError(str(exc), path) from None


def load_agent_panel(locations_path, agents_path, world):
    lpath, lheader, lrows = _read(locations_path, "locations")
    apath, aheader, arows = _read(agents_path, "agents")
    a = _parse(arows, aheader, apath, {
        "agent_id": _int, "birth_year": _int, "college_flag": _flag,
        "device_price_usd": _nonneg(_float), "hometown_city_id": _int})
    _check_unique(a["agent_id"], arows, apath, "agent_id")
    _check_city(a["hometown_city_id"], arows, apath, world, "hometown_city_id")
    loc = _parse(lrows, lheader, lpath, {"agent_id": _int, "year": _int, "city_id": _int})
    _check_unique(list(zip(loc["agent_id"], loc["year"])), lrows, lpath, "(agent_id, year)")
    _check_city(loc["city_id"], lrows, lpath, world)
    known = set(a["agent_id"])
    for aid, (k, _) in zip(loc["agent_id"], lrows):
        if aid not in known:
            raise SchemaError(f"agent_id {aid} not present in {apath.name}", lpath, k, aid)

    ids = np.array(sorted(known), dtype=np.int64)
    if len(loc["year"]):
        years = np.arange(min(loc["year"]), max(loc["year"]) + 1, dtype=np.int64)
    else:
        years = np.zeros(0, dtype=np.int64)
    res = np.full((len(ids), len(years)), -1, dtype=np.int64)
    if len(ids) and len(years):
        rows_a = np.searchsorted(ids, loc["agent_id"])
        res[rows_a, np.asarray(loc["year"]) - years[0]] = loc["city_id"]
        if np.any(res < 0):
            i, t = np.argwhere(res < 0)[0]
            raise SchemaError(f"agent {ids[i]} has no residence in year {years[t]} (gaps not allowed)", lpath)
    order = np.argsort(a["agent_id"], kind="stable")
    hometown = np.asarray(a["hometown_city_id"], dtype=np.int64)[order]
    if len(years) and np.any(hometown != res[:, 0]):
        k = int(np.flatnonzero(hometown != res[:, 0])[0])
        raise SchemaError(f"agent {ids[k]}: hometown {hometown[k]} differs from residence "
                          f"{res[k, 0]} in first year {years[0]}", apath)
    return AgentPanel(
        agent_ids=ids, years=years, residence=res,
        birth_year=np.asarray(a["birth_year"], dtype=np.int64)[order],
        college_flag=np.asarray(a["college_flag"], dtype=np.int64)[order],
        device_price=np.asarray(a["device_price_usd"], dtype=float)[order],
        hometown=hometown)


def load_network_panel(path, world, agents):
    path, header, rows = _read(path, "networks")
    c = _parse(rows, header, path, {"agent_id": _int, "year": _int, "city_id": _int,
                                    "friend_count": _int})
    _check_unique(list(zip(c["agent_id"], c["year"], c["city_id"])), rows, path,
                  "(agent_id, year, city_id)")
    _check_city(c["city_id"], rows, path, world)
    known = set(int(x) for x in agents.agent_ids)
    for aid, n, (k, _) in zip(c["agent_id"], c["friend_count"], rows):
        if aid not in known:
            raise SchemaError(f"agent_id {aid} is not in the agent panel", path, k, aid)
        if n < 1:
            raise SchemaError("friend_count must be >= 1 (omit zero rows)", path, k, n)
    n_a, n_c = len(agents.agent_ids), len(world)
    counts = {}
    years = np.asarray(c["year"], dtype=np.int64)
    ar = np.searchsorted(agents.agent_ids, np.asarray(c["agent_id"], dtype=np.int64))
    cc = world.positions(c["city_id"]) if rows else np.zeros(0, dtype=np.int64)
    vals = np.asarray(c["friend_count"], dtype=np.int64)
    for y in sorted(set(c["year"])):
        m = years == y
        mat = sp.csr_matrix((vals[m], (ar[m], cc[m])), shape=(n_a, n_c), dtype=np.int64)
        mat.sort_indices()
        counts[int(y)] = mat
    return NetworkPanel(agent_ids=agents.agent_ids.copy(), city_ids=world.ids.copy(), counts=counts)


def load_weather(path, world, window=None):
    path, header, rows = _read(path, "weather")
    c = _parse(rows, header, path, {"city_id": _int, "year": _int,
                                    "rainfall_mm": _nonneg(_float), "hot_days": _nonneg(_float)})
    _check_unique(list(zip(c["city_id"], c["year"])), rows, path, "(city_id, year)")
    _check_city(c["city_id"], rows, path, world)
    for v, (k, _) in zip(c["hot_days"], rows):
        if v > 366:
            raise SchemaError("hot_days must be within [0, 366]", path, k, v)
    if not rows:
        z = np.zeros((len(world), 0))
        return WeatherPanel(world.ids.copy(), np.zeros(0, dtype=np.int64), z, z.copy(), window=window)
    years = np.array(sorted(set(c["year"])), dtype=np.int64)
    rain = np.full((len(world), len(years)), np.nan)
    hot = np.full_like(rain, np.nan)
    ci = world.positions(c["city_id"])
    yi = np.searchsorted(years, c["year"])
    rain[ci, yi] = c["rainfall_mm"]
    hot[ci, yi] = c["hot_days"]
    present = ~np.isnan(rain)
    covered = present.any(axis=1)
    if np.any(present[covered] == False):  # noqa: E712
        i, t = np.argwhere(~present & covered[:, None])[0]
        raise SchemaError(f"city {world.ids[i]} has no weather row for year {years[t]}", path)
    keep = covered
    return WeatherPanel(world.ids[keep].copy(), years, rain[keep], hot[keep],
                        window=None if window is None else tuple(window))


def load_industries(path, world):
    path, header, rows = _read(path, "industries")
    c = _parse(rows, header, path, {"district_id": _int, "industry_code": str, "year": _int,
                                    "employment": _nonneg(_float), "avg_wage_usd": _nonneg(_float)})
    _check_unique(list(zip(c["district_id"], c["industry_code"], c["year"])), rows, path,
                  "(district_id, industry_code, year)")
    known = set(int(d) for d in world.district)
    for d, (k, _) in zip(c["district_id"], rows):
        if d not in known:
            raise SchemaError(f"district_id {d} does not exist in the world", path, k, d)
    districts = np.array(sorted(set(c["district_id"])), dtype=np.int64)
    inds = tuple(sorted(set(c["industry_code"])))
    years = np.array(sorted(set(c["year"])), dtype=np.int64)
    emp = np.full((len(districts), len(inds), len(years)), np.nan)
    wage = np.full_like(emp, np.nan)
    if rows:
        di = np.searchsorted(districts, c["district_id"])
        ki = np.array([inds.index(x) for x in c["industry_code"]])
        yi = np.searchsorted(years, c["year"])
        emp[di, ki, yi] = c["employment"]
        wage[di, ki, yi] = c["avg_wage_usd"]
    return IndustryPanel(districts, inds, years, emp, wage)


def load_survey(path, world):
    path, header, rows = _read(path, "survey")
    c = _parse(rows, header, path, {"respondent_id": _int, "current_city_id": _int,
                                    "dream_city_id": _int})
    _check_unique(c["respondent_id"], rows, path, "respondent_id")
    _check_city(c["current_city_id"], rows, path, world, "current_city_id")
    _check_city(c["dream_city_id"], rows, path, world, "dream_city_id")
    return SurveyChoices(np.asarray(c["respondent_id"], dtype=np.int64),
                         np.asarray(c["current_city_id"], dtype=np.int64),
                         np.asarray(c["dream_city_id"], dtype=np.int64))


def load_city_covariates(path, world):
    path, header, rows = _read(path, "city_covariates")
    c = _parse(rows, header, path, {"city_id": _int, "name": str, "value": _float})
    _check_unique(list(zip(c["city_id"], c["name"])), rows, path, "(city_id, name)")
    _check_city(c["city_id"], rows, path, world)
    values = {}
    for cid, name, v in zip(c["city_id"], c["name"], c["value"]):
        values.setdefault(name, {})[cid] = v
    return CityCovariates(values)


def load_amenities(path, world):
    """Per-city amenity values aligned to ``world``; cities absent get 0."""
    path, header, rows = _read(path, "amenities")
    c = _parse(rows, header, path, {"city_id": _int, "amenity": _float,
                                    "se": lambda t: float(t) if t else float("nan")})
    _check_unique(c["city_id"], rows, path, "city_id")
    _check_city(c["city_id"], rows, path, world)
    out = np.zeros(len(world))
    out[world.positions(c["city_id"])] = c["amenity"]
    return out


# --------------------------------------------------------------------------- #
# writers
# --------------------------------------------------------------------------- #

def write_world(path, world):
    cs = world.cities
    write_table(path, {
        "city_id": [c.city_id for c in cs], "name": [c.name for c in cs],
        "lat": [c.lat for c in cs], "lon": [c.lon for c in cs],
        "state_id": [c.state_id for c in cs], "district_id": [c.district_id for c in cs],
        "avg_wage_usd": [c.avg_wage for c in cs], "population": [c.population for c in cs]})


def write_agent_panel(locations_path, agents_path, panel):
    n, t = panel.residence.shape
    write_table(locations_path, {
        "agent_id": np.repeat(panel.agent_ids, t), "year": np.tile(panel.years, n),
        "city_id": panel.residence.ravel()})
    write_table(agents_path, {
        "agent_id": panel.agent_ids, "birth_year": panel.birth_year,
        "college_flag": panel.college_flag, "device_price_usd": panel.device_price,
        "hometown_city_id": panel.hometown})


def write_network_panel(path, networks):
    rows = list(networks.rows())
    cols = list(zip(*rows)) if rows else [[], [], [], []]
    write_table(path, dict(zip(SCHEMAS["networks"], cols)))


def write_weather(path, weather):
    n, t = weather.rainfall.shape
    write_table(path, {
        "city_id": np.repeat(weather.city_ids, t), "year": np.tile(weather.years, n),
        "rainfall_mm": weather.rainfall.ravel(), "hot_days": weather.hot_days.ravel()})


def write_industries(path, industries):
    d, k, y = np.nonzero(industries.present)
    write_table(path, {
        "district_id": industries.district_ids[d],
        "industry_code": [industries.industries[i] for i in k],
        "year": industries.years[y],
        "employment": industries.employment[d, k, y],
        "avg_wage_usd": industries.wage[d, k, y]})


def write_survey(path, survey):
    write_table(path, {"respondent_id": survey.respondent_id,
                       "current_city_id": survey.current_city,
                       "dream_city_id": survey.dream_city})


def write_city_covariates(path, covariates):
    rows = [(cid, name, v) for name in covariates.names()
            for cid, v in sorted(covariates.values[name].items())]
    cols = list(zip(*rows)) if rows else [[], [], []]
    write_table(path, dict(zip(SCHEMAS["city_covariates"], cols)))


def write_amenities(path, world, amenity, se=None):
    se = np.full(len(world), np.nan) if se is None else se
    write_table(path, {"city_id": world.ids, "amenity": amenity, "se": se})

"""Deterministic synthetic stay generator with archetype areas.

Four built-in archetypes (entertainment, office, station_street,
residential) produce separable stay patterns: weekend-heavy short-to-medium
visits, weekday long workdays, weekday rush-hour minute-stays, and
night-time very long stays.  A :class:`SyntheticCity` assigns one archetype
per 50 m cell on a row-major grid; :func:`generate` draws every cell's
stays from truncated-normal mixtures using per-cell sub-seeds, so output is
a pure function of the city and does not depend on generation order.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from datetime import date, datetime, time, timedelta
from typing import Sequence

import numpy as np

from .errors import ConfigError, ParseError
from .mesh import LAT_UNITS_50M, LON_UNITS_50M, Geocode, MeshLevel, _digits_from_50m_indices
from .stays import DayType, StayRecord

#: Each mixture component is (mean, std, weight); means/stds in minutes.
Mixture = Sequence[tuple[float, float, float]]

DEFAULT_START = date(2021, 4, 5)  # a Monday
DEFAULT_WEEKS = 4


@dataclass(frozen=True)
class ArchetypeSpec:
    name: str
    day_weights: dict[DayType, float]
    arrival_mixture: Mixture  # minutes of day
    duration_mixture: Mixture  # minutes
    users: int = 16
    stays_per_user: int = 30

    def __post_init__(self):
        if any(w < 0 for w in self.day_weights.values()) or sum(self.day_weights.values()) <= 0:
            raise ConfigError(f"{self.name}: day weights must be non-negative with positive sum")
        for label, mix in (("arrival", self.arrival_mixture), ("duration", self.duration_mixture)):
            weights = [w for _, _, w in mix]
            if not mix or any(w < 0 for w in weights) or abs(sum(weights) - 1.0) > 1e-9:
                raise ConfigError(f"{self.name}: {label} mixture weights must sum to 1")
        if self.users < 1 or self.stays_per_user < 1:
            raise ConfigError(f"{self.name}: users and stays_per_user must be >= 1")

    @property
    def mean_arrival_minute(self) -> float:
        return sum(m * w for m, _, w in self.arrival_mixture)


DEFAULT_ARCHETYPES: dict[str, ArchetypeSpec] = {
    "entertainment": ArchetypeSpec(
        "entertainment",
        {DayType.WEEKDAY: 0.4, DayType.WEEKEND_OR_HOLIDAY: 0.6},
        arrival_mixture=((780.0, 150.0, 0.6), (1140.0, 90.0, 0.4)),
        duration_mixture=((45.0, 20.0, 0.55), (100.0, 35.0, 0.45)),
    ),
    "office": ArchetypeSpec(
        "office",
        {DayType.WEEKDAY: 0.85, DayType.WEEKEND_OR_HOLIDAY: 0.15},
        arrival_mixture=((510.0, 45.0, 1.0),),
        duration_mixture=((520.0, 80.0, 1.0),),
    ),
    "station_street": ArchetypeSpec(
        "station_street",
        {DayType.WEEKDAY: 0.8, DayType.WEEKEND_OR_HOLIDAY: 0.2},
        arrival_mixture=((480.0, 40.0, 0.5), (1080.0, 40.0, 0.5)),
        duration_mixture=((12.0, 6.0, 1.0),),
    ),
    "residential": ArchetypeSpec(
        "residential",
        {DayType.WEEKDAY: 0.55, DayType.WEEKEND_OR_HOLIDAY: 0.45},
        arrival_mixture=((1290.0, 80.0, 1.0),),
        duration_mixture=((820.0, 100.0, 1.0),),
    ),
}


@dataclass
class SyntheticCity:
    origin_lat: float
    origin_lon: float
    cells: list[ArchetypeSpec]
    rng_seed: int
    columns: int = 20
    start_date: date = DEFAULT_START
    weeks: int = DEFAULT_WEEKS

    def __post_init__(self):
        if self.columns < 1:
            raise ConfigError("columns must be >= 1")
        if self.weeks < 1:
            raise ConfigError("weeks must be >= 1")
        if not self.cells:
            raise ConfigError("city has no cells")
        self._ilat0 = math.floor(self.origin_lat * LAT_UNITS_50M)
        self._ilon0 = math.floor((self.origin_lon - 100.0) * LON_UNITS_50M)
        rows = (len(self.cells) - 1) // self.columns
        for ilat, ilon in ((self._ilat0, self._ilon0), (self._ilat0 + rows, self._ilon0 + self.columns - 1)):
            lat = ilat / LAT_UNITS_50M
            lon = 100.0 + ilon / LON_UNITS_50M
            if not (0.0 <= lat and lat * 1.5 < 100.0 and 100.0 <= lon < 180.0):
                raise ConfigError(f"cell at ({lat}, {lon}) falls outside the mesh bands")

    def cell_indices(self, i: int) -> tuple[int, int]:
        row, col = divmod(i, self.columns)
        return self._ilat0 + row, self._ilon0 + col

    def cell_geocode(self, i: int) -> Geocode:
        ilat, ilon = self.cell_indices(i)
        return Geocode(_digits_from_50m_indices(ilat, ilon, MeshLevel.M50), MeshLevel.M50)

    def dates_by_type(self) -> dict[DayType, list[date]]:
        days = [self.start_date + timedelta(days=d) for d in range(7 * self.weeks)]
        return {
            DayType.WEEKDAY: [d for d in days if d.weekday() < 5],
            DayType.WEEKEND_OR_HOLIDAY: [d for d in days if d.weekday() >= 5],
        }


def _draw_mixture(rng: np.random.Generator, mix: Mixture, n: int) -> np.ndarray:
    means = np.array([m for m, _, _ in mix])
    stds = np.array([s for _, s, _ in mix])
    weights = np.array([w for _, _, w in mix])
    comp = rng.choice(len(means), size=n, p=weights / weights.sum())
    return rng.normal(means[comp], stds[comp])


def _cell_stays(
    city: SyntheticCity, cell_index: int, spec: ArchetypeSpec, seed: np.random.SeedSequence
) -> list[StayRecord]:
    rng = np.random.default_rng(seed)
    n = spec.users * spec.stays_per_user
    dates = city.dates_by_type()
    w_wd = spec.day_weights.get(DayType.WEEKDAY, 0.0)
    w_we = spec.day_weights.get(DayType.WEEKEND_OR_HOLIDAY, 0.0)
    weekend = rng.random(n) < w_we / (w_wd + w_we)
    date_idx_wd = rng.integers(0, len(dates[DayType.WEEKDAY]), size=n)
    date_idx_we = rng.integers(0, len(dates[DayType.WEEKEND_OR_HOLIDAY]), size=n)
    minutes = np.clip(np.rint(_draw_mixture(rng, spec.arrival_mixture, n)), 0, 1439).astype(int)
    durations = np.maximum(np.rint(_draw_mixture(rng, spec.duration_mixture, n)), 1).astype(int)

    ilat, ilon = city.cell_indices(cell_index)
    # Keep points off the cell edges so float rounding never crosses them.
    lats = (ilat + 0.05 + 0.9 * rng.random(n)) / LAT_UNITS_50M
    lons = 100.0 + (ilon + 0.05 + 0.9 * rng.random(n)) / LON_UNITS_50M

    stays = []
    for j in range(n):
        day_list = dates[DayType.WEEKEND_OR_HOLIDAY] if weekend[j] else dates[DayType.WEEKDAY]
        day = day_list[date_idx_we[j] if weekend[j] else date_idx_wd[j]]
        minute = int(minutes[j])
        stays.append(
            StayRecord(
                user_id=f"c{cell_index:04d}u{j // spec.stays_per_user:04d}",
                latitude=float(lats[j]),
                longitude=float(lons[j]),
                arrival=datetime.combine(day, time(minute // 60, minute % 60)),
                duration_minutes=int(durations[j]),
            )
        )
    return stays


def generate(city: SyntheticCity) -> list[StayRecord]:
    """All stays of the city; deterministic in the city's seed."""
    seeds = np.random.SeedSequence(city.rng_seed).spawn(len(city.cells))
    stays: list[StayRecord] = []
    for i, spec in enumerate(city.cells):
        stays.extend(_cell_stays(city, i, spec, seeds[i]))
    return stays


def planted_city(
    n_per_archetype: int,
    seed: int,
    *,
    users: int = 16,
    stays_per_user: int = 30,
    origin: tuple[float, float] = (35.10, 136.90),
    columns: int | None = None,
) -> tuple[SyntheticCity, dict[str, str]]:
    """A city with n cells of each archetype plus its ground-truth label map."""
    if n_per_archetype < 1:
        raise ConfigError("n_per_archetype must be >= 1")
    cells = [
        replace(DEFAULT_ARCHETYPES[name], users=users, stays_per_user=stays_per_user)
        for name in sorted(DEFAULT_ARCHETYPES)
        for _ in range(n_per_archetype)
    ]
    if columns is None:
        columns = max(1, math.ceil(math.sqrt(len(cells))))
    city = SyntheticCity(
        origin_lat=origin[0],
        origin_lon=origin[1],
        cells=cells,
        rng_seed=seed,
        columns=columns,
    )
    labels = {city.cell_geocode(i).id: spec.name for i, spec in enumerate(cells)}
    return city, labels


def diverse_city(
    n_cells: int,
    seed: int,
    *,
    users: int = 12,
    stays_per_user: int = 25,
    origin: tuple[float, float] = (35.10, 136.90),
    columns: int | None = None,
) -> SyntheticCity:
    """A city whose every cell has its own randomized stay pattern.

    Unlike the four fixed archetypes, each cell draws a fresh arrival
    mixture (1-3 components anywhere in the day), a duration mixture
    spanning minutes to half a day, and its own weekday/weekend balance.
    Useful as a stand-in for a diverse multi-city training corpus, e.g.
    when building anchors that must cover many usage patterns.
    """
    if n_cells < 1:
        raise ConfigError("n_cells must be >= 1")
    rng = np.random.default_rng(seed)
    cells = []
    for i in range(n_cells):
        n_arr = int(rng.integers(1, 4))
        arr_means = rng.uniform(0.0, 1440.0, n_arr)
        arr_stds = rng.uniform(20.0, 180.0, n_arr)
        arr_w = rng.dirichlet(np.ones(n_arr))
        n_dur = int(rng.integers(1, 3))
        dur_means = np.exp(rng.uniform(np.log(10.0), np.log(900.0), n_dur))
        dur_stds = dur_means * rng.uniform(0.2, 0.6, n_dur)
        dur_w = rng.dirichlet(np.ones(n_dur))
        weekday = float(rng.uniform(0.2, 0.9))
        cells.append(
            ArchetypeSpec(
                name=f"diverse{i}",
                day_weights={
                    DayType.WEEKDAY: weekday,
                    DayType.WEEKEND_OR_HOLIDAY: 1.0 - weekday,
                },
                arrival_mixture=tuple(
                    (float(m), float(s), float(w))
                    for m, s, w in zip(arr_means, arr_stds, arr_w / arr_w.sum())
                ),
                duration_mixture=tuple(
                    (float(m), float(s), float(w))
                    for m, s, w in zip(dur_means, dur_stds, dur_w / dur_w.sum())
                ),
                users=users,
                stays_per_user=stays_per_user,
            )
        )
    if columns is None:
        columns = max(1, math.ceil(math.sqrt(n_cells)))
    return SyntheticCity(
        origin_lat=origin[0],
        origin_lon=origin[1],
        cells=cells,
        rng_seed=seed,
        columns=columns,
    )


def _archetype_from_dict(name: str, raw: dict) -> ArchetypeSpec:
    try:
        day_raw = raw["day_weights"]
        return ArchetypeSpec(
            name=name,
            day_weights={
                DayType.WEEKDAY: float(day_raw["weekday"]),
                DayType.WEEKEND_OR_HOLIDAY: float(day_raw["weekend"]),
            },
            arrival_mixture=tuple((float(m), float(s), float(w)) for m, s, w in raw["arrival_mixture"]),
            duration_mixture=tuple((float(m), float(s), float(w)) for m, s, w in raw["duration_mixture"]),
            users=int(raw.get("users", 16)),
            stays_per_user=int(raw.get("stays_per_user", 30)),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"archetype {name!r}: {exc}")


def city_from_config(path, seed: int) -> SyntheticCity:
    """Load a city description from a JSON config file.

    Keys: origin_lat, origin_lon, optional columns / start_date / weeks /
    archetypes (name -> spec), and cells: a list of
    ``{"archetype": name, "count": n, "users": ..., "stays_per_user": ...}``
    entries (the last two optional).
    """
    try:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ParseError(str(exc), path)
    try:
        archetypes = dict(DEFAULT_ARCHETYPES)
        for name, spec_raw in raw.get("archetypes", {}).items():
            archetypes[name] = _archetype_from_dict(name, spec_raw)
        cells: list[ArchetypeSpec] = []
        for entry in raw["cells"]:
            base = archetypes[entry["archetype"]]
            overrides = {}
            if "users" in entry:
                overrides["users"] = int(entry["users"])
            if "stays_per_user" in entry:
                overrides["stays_per_user"] = int(entry["stays_per_user"])
            cells.extend([replace(base, **overrides)] * int(entry.get("count", 1)))
        kwargs = {}
        if "columns" in raw:
            kwargs["columns"] = int(raw["columns"])
        if "start_date" in raw:
            kwargs["start_date"] = date.fromisoformat(raw["start_date"])
        if "weeks" in raw:
            kwargs["weeks"] = int(raw["weeks"])
        return SyntheticCity(
            origin_lat=float(raw["origin_lat"]),
            origin_lon=float(raw["origin_lon"]),
            cells=cells,
            rng_seed=seed,
            **kwargs,
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"bad city config {path}: {exc}")

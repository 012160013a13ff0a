"""Grid meshes, geocodes, and privacy-filtered aggregation of stays.

Geocodes follow the standard Japanese grid-square scheme for the leading
8 digits (primary mesh from ``floor(lat*1.5)`` / ``floor(lon)-100``, then an
8x8 secondary split, then a 10x10 tertiary split = the 1 km cell).  Digits
9-10 are quadrant digits (1=SW, 2=SE, 3=NW, 4=NE) halving the cell twice to
500 m and then 250 m, so a 250 m mesh has a 10-digit code.  Digits 11-12
split the 250 m cell 5x5 into 50 m cells: digit 11 is the row counted from
the south (0-4) and digit 12 the column from the west (0-4), giving a
12-digit code.  250 m codes are therefore prefixes of the 50 m codes they
contain.

Cell sizes are exact in arc units: a 250 m cell spans 7.5" latitude by
11.25" longitude (1/480 x 1/320 degrees) and a 50 m cell 1.5" x 2.25"
(1/2400 x 1/1600 degrees).  Points on a cell's south or west edge belong to
that cell (floor semantics).  The scheme covers latitudes 0..66.66 N and
longitudes 100..180 E.

:func:`aggregate` turns stays into an :class:`AreaTable` in four steps:
assign every stay to its 50 m mesh; keep 50 m meshes with more than 10
unique users; reassign the stays of excluded 50 m meshes to their 250 m
parent; keep 250 m meshes with more than 10 unique users.  Every surviving
row has ``unique_users >= 11``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from enum import Enum
from math import floor
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import DataError, ParseError, UnsupportedRegionError
from .stays import (
    DURATION_BIN_EDGES,
    EMPTY_CALENDAR,
    N_CLASSES,
    HolidayCalendar,
    StayRecord,
    discretize,
)

MIN_UNIQUE_USERS = 11  # "more than 10 users"

#: 50 m grid units per degree of latitude / longitude.
LAT_UNITS_50M = 2400
LON_UNITS_50M = 1600

#: Fine histogram shape kept alongside the 168 training classes:
#: day type (2) x 30-minute arrival slot (48) x duration bin (7).
FINE_SHAPE = (2, 48, 7)

AREA_CSV_HEADER = ["geocode", "level", "unique_users"] + [f"c{i}" for i in range(N_CLASSES)]


class MeshLevel(Enum):
    M250 = "250m"
    M50 = "50m"

    @property
    def digits(self) -> int:
        return 10 if self is MeshLevel.M250 else 12

    @property
    def lat_units(self) -> int:
        """Grid units per degree of latitude at this level."""
        return 480 if self is MeshLevel.M250 else LAT_UNITS_50M

    @property
    def lon_units(self) -> int:
        return 320 if self is MeshLevel.M250 else LON_UNITS_50M


@dataclass(frozen=True, order=True)
class Geocode:
    code: int
    level: MeshLevel = field(compare=False)

    @property
    def id(self) -> str:
        """Zero-padded digit string (10 digits for 250 m, 12 for 50 m)."""
        return str(self.code).zfill(self.level.digits)

    @classmethod
    def from_string(cls, text: str) -> "Geocode":
        if not text.isdigit():
            raise ParseError(f"geocode {text!r} is not a digit string")
        if len(text) == 10:
            level = MeshLevel.M250
        elif len(text) == 12:
            level = MeshLevel.M50
        else:
            raise ParseError(f"geocode {text!r} has {len(text)} digits, expected 10 or 12")
        g = cls(int(text), level)
        _indices_of(g)  # validates quadrant / sub-cell digits
        return g


def _digits_from_50m_indices(ilat: int, ilon: int, level: MeshLevel) -> int:
    """Build a geocode from integer 50 m grid indices.

    Every divisor below is a multiple of 5, so the 10 leading digits depend
    only on the containing 250 m cell; this is what makes 250 m codes
    prefix-consistent parents of 50 m codes.
    """
    primary = (ilat // 1600) * 100 + ilon // 1600
    secondary = ((ilat // 200) % 8) * 10 + (ilon // 200) % 8
    tertiary = ((ilat // 20) % 10) * 10 + (ilon // 20) % 10
    quad500 = 1 + ((ilat // 10) % 2) * 2 + (ilon // 10) % 2
    quad250 = 1 + ((ilat // 5) % 2) * 2 + (ilon // 5) % 2
    code = (((primary * 100 + secondary) * 100 + tertiary) * 10 + quad500) * 10 + quad250
    if level is MeshLevel.M250:
        return code
    return code * 100 + (ilat % 5) * 10 + ilon % 5


def encode_mesh(lat: float, lon: float, level: MeshLevel) -> Geocode:
    """Geocode of the cell containing (lat, lon) at the given level."""
    if not (0.0 <= lat and lat * 1.5 < 100.0):
        raise UnsupportedRegionError(f"latitude {lat} outside supported band 0..66.66N")
    if not (100.0 <= lon < 180.0):
        raise UnsupportedRegionError(f"longitude {lon} outside supported band 100E..180E")
    ilat = floor(lat * LAT_UNITS_50M)
    ilon = floor((lon - 100.0) * LON_UNITS_50M)
    return Geocode(_digits_from_50m_indices(ilat, ilon, level), level)


def _indices_of(g: Geocode) -> tuple[int, int]:
    """Integer grid indices (lat, lon) of the cell's SW corner at its own level."""
    text = str(g.code).zfill(g.level.digits)
    if len(text) != g.level.digits or g.code < 0:
        raise ParseError(f"geocode {g.code} does not fit {g.level.digits} digits")
    d = [int(c) for c in text]
    quad500 = d[8]
    quad250 = d[9]
    if not (1 <= quad500 <= 4 and 1 <= quad250 <= 4):
        raise ParseError(f"geocode {text}: quadrant digits must be 1..4")
    ilat = (d[0] * 10 + d[1]) * 8 + d[4]
    ilon = (d[2] * 10 + d[3]) * 8 + d[5]
    ilat = (ilat * 10 + d[6]) * 2 + (quad500 - 1) // 2
    ilon = (ilon * 10 + d[7]) * 2 + (quad500 - 1) % 2
    ilat = ilat * 2 + (quad250 - 1) // 2
    ilon = ilon * 2 + (quad250 - 1) % 2
    if g.level is MeshLevel.M250:
        return ilat, ilon
    if not (d[10] <= 4 and d[11] <= 4):
        raise ParseError(f"geocode {text}: 50m row/column digits must be 0..4")
    return ilat * 5 + d[10], ilon * 5 + d[11]


def decode_mesh(g: Geocode) -> tuple[tuple[float, float], tuple[tuple[float, float], ...]]:
    """Center (lat, lon) and closed 5-point (lon, lat) ring of the cell."""
    ilat, ilon = _indices_of(g)
    lat_units = g.level.lat_units
    lon_units = g.level.lon_units
    south = ilat / lat_units
    west = 100.0 + ilon / lon_units
    north = (ilat + 1) / lat_units
    east = 100.0 + (ilon + 1) / lon_units
    center = ((ilat + 0.5) / lat_units, 100.0 + (ilon + 0.5) / lon_units)
    ring = ((west, south), (east, south), (east, north), (west, north), (west, south))
    return center, ring


def parent_250m(g: Geocode) -> Geocode:
    """The 250 m cell containing a 50 m cell (identity on 250 m codes)."""
    if g.level is MeshLevel.M250:
        return g
    return Geocode(g.code // 100, MeshLevel.M250)


@dataclass
class AreaRow:
    """One aggregated mesh: class counts, fine histogram, and user count.

    ``stays`` keeps the (week_minute, duration) pairs of the mesh's source
    stays so anchor data can be sampled later; it is absent on tables loaded
    from CSV.
    """

    geocode: Geocode
    counts: np.ndarray  # (168,) int64
    fine_counts: np.ndarray  # (2, 48, 7) int64
    unique_users: int
    stays: np.ndarray | None = None  # (n, 2) int64 [week_minute, duration]

    @property
    def center(self) -> tuple[float, float]:
        return decode_mesh(self.geocode)[0]

    @property
    def polygon(self) -> tuple[tuple[float, float], ...]:
        return decode_mesh(self.geocode)[1]


@dataclass
class AreaTable:
    """Aggregated meshes keyed by geocode id string, in deterministic order."""

    rows: dict[str, AreaRow]

    def __len__(self) -> int:
        return len(self.rows)

    def ids(self) -> list[str]:
        return list(self.rows)

    def counts_matrix(self) -> tuple[list[str], np.ndarray]:
        ids = self.ids()
        return ids, np.stack([self.rows[i].counts for i in ids]).astype(np.float64)


def _accumulate(
    bucket_stays: Sequence[tuple[StayRecord, int, int, int]],
    geocode: Geocode,
    users: set[str],
) -> AreaRow:
    counts = np.zeros(N_CLASSES, dtype=np.int64)
    fine = np.zeros(FINE_SHAPE, dtype=np.int64)
    pairs = np.empty((len(bucket_stays), 2), dtype=np.int64)
    for i, (stay, cls_idx, day_type, slot) in enumerate(bucket_stays):
        counts[cls_idx] += 1
        fine[day_type, slot, cls_idx % 7] += 1
        pairs[i, 0] = stay.week_minute
        pairs[i, 1] = stay.duration_minutes
    return AreaRow(
        geocode=geocode,
        counts=counts,
        fine_counts=fine,
        unique_users=len(users),
        stays=pairs,
    )


def aggregate(stays: Sequence[StayRecord], cal: HolidayCalendar = EMPTY_CALENDAR) -> AreaTable:
    """Run the four-step 50 m / 250 m aggregation with the >10-user filter."""
    if not stays:
        raise DataError("no stays to aggregate")

    by_50m: dict[Geocode, list] = {}
    users_50m: dict[Geocode, set] = {}
    for stay in stays:
        cls = discretize(stay, cal)
        slot = (stay.arrival.hour * 60 + stay.arrival.minute) // 30
        g50 = encode_mesh(stay.latitude, stay.longitude, MeshLevel.M50)
        by_50m.setdefault(g50, []).append((stay, cls.index, int(cls.day_type), slot))
        users_50m.setdefault(g50, set()).add(stay.user_id)

    kept_50m = {g for g, users in users_50m.items() if len(users) >= MIN_UNIQUE_USERS}

    by_250m: dict[Geocode, list] = {}
    users_250m: dict[Geocode, set] = {}
    for g50, bucket in by_50m.items():
        if g50 in kept_50m:
            continue
        g250 = parent_250m(g50)
        by_250m.setdefault(g250, []).extend(bucket)
        users_250m.setdefault(g250, set()).update(users_50m[g50])

    kept_250m = {g for g, users in users_250m.items() if len(users) >= MIN_UNIQUE_USERS}

    rows: dict[str, AreaRow] = {}
    for g in sorted(kept_50m, key=lambda g: g.code):
        rows[g.id] = _accumulate(by_50m[g], g, users_50m[g])
    for g in sorted(kept_250m, key=lambda g: g.code):
        rows[g.id] = _accumulate(by_250m[g], g, users_250m[g])
    return AreaTable(rows)


def write_area_table(path, table: AreaTable) -> None:
    """Write ``geocode,level,unique_users,c0,...,c167`` rows."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(AREA_CSV_HEADER)
        for gid, row in table.rows.items():
            writer.writerow(
                [gid, row.geocode.level.value, row.unique_users] + row.counts.tolist()
            )


def read_area_table(path) -> AreaTable:
    """Read a table written by :func:`write_area_table`.

    Fine histograms and source stays are not part of the CSV format, so the
    returned rows carry zero fine counts and ``stays=None``.
    """
    rows: dict[str, AreaRow] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != AREA_CSV_HEADER:
            raise ParseError("unexpected area table header", path, 1)
        for lineno, rec in enumerate(reader, start=2):
            if not rec:
                continue
            if len(rec) != len(AREA_CSV_HEADER):
                raise ParseError(f"expected {len(AREA_CSV_HEADER)} fields", path, lineno)
            try:
                geocode = Geocode.from_string(rec[0])
                if geocode.level.value != rec[1]:
                    raise ParseError(
                        f"level {rec[1]!r} does not match {len(rec[0])}-digit geocode",
                        path,
                        lineno,
                    )
                counts = np.array([int(v) for v in rec[3:]], dtype=np.int64)
                rows[rec[0]] = AreaRow(
                    geocode=geocode,
                    counts=counts,
                    fine_counts=np.zeros(FINE_SHAPE, dtype=np.int64),
                    unique_users=int(rec[2]),
                )
            except (ValueError, DataError) as exc:
                if isinstance(exc, ParseError):
                    raise
                raise ParseError(str(exc), path, lineno)
    return AreaTable(rows)

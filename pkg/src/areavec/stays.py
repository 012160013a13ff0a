"""Stay records and their discretization into 168 stay-feature classes.

A stay is one dwell event: who, where, when it started, and how long it
lasted.  Stays are discretized along three axes:

* day type: weekday vs. weekend-or-holiday (2 values),
* arrival time: 2-hour bins over the day (12 values),
* duration: half-open minute ranges [0,30), [30,60), [60,120), [120,240),
  [240,360), [360,720), [720,inf) (7 values),

giving 2 * 12 * 7 = 168 classes.  The class index is laid out day-type-major:
``index = day_type*84 + arrival_bin*7 + duration_bin``.  Both directions of
the bijection live here (:func:`discretize` and :func:`class_label`).

A stay is classified by its arrival instant only; a stay that crosses
midnight or a weekday/weekend boundary keeps the class of its start.
"""

from __future__ import annotations

import csv
from bisect import bisect_right
from dataclasses import dataclass, field
from datetime import date, datetime
from enum import IntEnum
from pathlib import Path
from typing import Iterable, Sequence

from .errors import ConfigError, DataError, ParseError

DAY_TYPES = 2
ARRIVAL_BINS = 12
DURATION_BINS = 7
N_CLASSES = DAY_TYPES * ARRIVAL_BINS * DURATION_BINS  # 168

#: Upper edges of the duration bins (minutes); bin i covers
#: [edges[i-1], edges[i]) with edges[-1] = 0 and edges[7] = inf.
DURATION_BIN_EDGES = (30, 60, 120, 240, 360, 720)

MINUTES_PER_DAY = 1440
MINUTES_PER_WEEK = 7 * MINUTES_PER_DAY

STAY_CSV_HEADER = ["user_id", "latitude", "longitude", "arrival", "duration_minutes"]
ARRIVAL_FORMAT = "%Y-%m-%dT%H:%M"


class DayType(IntEnum):
    WEEKDAY = 0
    WEEKEND_OR_HOLIDAY = 1


@dataclass(frozen=True)
class StayRecord:
    """One stay event at minute precision, in local time."""

    user_id: str
    latitude: float
    longitude: float
    arrival: datetime
    duration_minutes: int

    def __post_init__(self):
        if not -90.0 <= self.latitude <= 90.0:
            raise DataError(f"latitude {self.latitude} outside [-90, 90]")
        if not -180.0 <= self.longitude <= 180.0:
            raise DataError(f"longitude {self.longitude} outside [-180, 180]")
        if self.duration_minutes < 0:
            raise DataError(f"negative duration {self.duration_minutes}")

    @property
    def week_minute(self) -> int:
        """Minutes since Monday 00:00 of the arrival's week (0..10079)."""
        return (
            self.arrival.weekday() * MINUTES_PER_DAY
            + self.arrival.hour * 60
            + self.arrival.minute
        )


@dataclass(frozen=True)
class StayClass:
    """One of the 168 discretized stay-feature classes."""

    day_type: DayType
    arrival_bin: int
    duration_bin: int

    def __post_init__(self):
        if not 0 <= self.arrival_bin < ARRIVAL_BINS:
            raise ConfigError(f"arrival_bin {self.arrival_bin} outside 0..11")
        if not 0 <= self.duration_bin < DURATION_BINS:
            raise ConfigError(f"duration_bin {self.duration_bin} outside 0..6")

    @property
    def index(self) -> int:
        return (
            int(self.day_type) * ARRIVAL_BINS * DURATION_BINS
            + self.arrival_bin * DURATION_BINS
            + self.duration_bin
        )


@dataclass(frozen=True)
class HolidayCalendar:
    """A set of dates treated like weekends when classifying stays.

    The default (empty) calendar classifies Saturdays and Sundays only.
    """

    holiday_dates: frozenset = field(default_factory=frozenset)

    def __contains__(self, day: date) -> bool:
        return day in self.holiday_dates

    @classmethod
    def from_file(cls, path) -> "HolidayCalendar":
        """Read one ISO date per line; blank lines and ``#`` comments allowed."""
        days = set()
        with open(path, encoding="utf-8") as fh:
            for lineno, raw in enumerate(fh, start=1):
                text = raw.split("#", 1)[0].strip()
                if not text:
                    continue
                try:
                    days.add(date.fromisoformat(text))
                except ValueError as exc:
                    raise ParseError(f"bad holiday date {text!r}: {exc}", path, lineno)
        return cls(frozenset(days))


EMPTY_CALENDAR = HolidayCalendar()


def duration_bin_of(duration_minutes: int) -> int:
    """Map a non-negative duration in minutes to its bin 0..6."""
    if duration_minutes < 0:
        raise DataError(f"negative duration {duration_minutes}")
    return bisect_right(DURATION_BIN_EDGES, duration_minutes)


def discretize(stay: StayRecord, cal: HolidayCalendar = EMPTY_CALENDAR) -> StayClass:
    """Classify a stay by its arrival date/time and duration."""
    arrival_date = stay.arrival.date()
    weekendish = stay.arrival.weekday() >= 5 or arrival_date in cal
    return StayClass(
        day_type=DayType.WEEKEND_OR_HOLIDAY if weekendish else DayType.WEEKDAY,
        arrival_bin=stay.arrival.hour // 2,
        duration_bin=duration_bin_of(stay.duration_minutes),
    )


def class_label(index: int) -> StayClass:
    """Inverse of :attr:`StayClass.index`."""
    if not 0 <= index < N_CLASSES:
        raise ConfigError(f"class index {index} outside 0..{N_CLASSES - 1}")
    day_type, rest = divmod(index, ARRIVAL_BINS * DURATION_BINS)
    arrival_bin, duration_bin = divmod(rest, DURATION_BINS)
    return StayClass(DayType(day_type), arrival_bin, duration_bin)


def read_stays(path) -> list[StayRecord]:
    """Read the stay CSV: ``user_id,latitude,longitude,arrival,duration_minutes``."""
    stays = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != STAY_CSV_HEADER:
            raise ParseError(f"expected header {STAY_CSV_HEADER}, got {header}", path, 1)
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 5:
                raise ParseError(f"expected 5 fields, got {len(row)}", path, lineno)
            try:
                stays.append(
                    StayRecord(
                        user_id=row[0],
                        latitude=float(row[1]),
                        longitude=float(row[2]),
                        arrival=datetime.strptime(row[3], ARRIVAL_FORMAT),
                        duration_minutes=int(row[4]),
                    )
                )
            except (ValueError, DataError) as exc:
                raise ParseError(str(exc), path, lineno)
    return stays


def write_stays(path, stays: Iterable[StayRecord]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(STAY_CSV_HEADER)
        for s in stays:
            writer.writerow(
                [
                    s.user_id,
                    repr(float(s.latitude)),
                    repr(float(s.longitude)),
                    s.arrival.strftime(ARRIVAL_FORMAT),
                    s.duration_minutes,
                ]
            )

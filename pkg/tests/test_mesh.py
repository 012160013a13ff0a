"""Geocode scheme and the privacy-filtered aggregation."""

import math
import random
from datetime import datetime

import numpy as np
import pytest

from areavec.errors import DataError, ParseError, UnsupportedRegionError
from areavec.mesh import (
    AreaTable,
    Geocode,
    MeshLevel,
    aggregate,
    decode_mesh,
    encode_mesh,
    parent_250m,
    read_area_table,
    write_area_table,
)
from areavec.stays import StayRecord

ARCSEC = 1.0 / 3600.0


def _reference_1km_code(lat: float, lon: float) -> str:
    """Independent implementation of the standard 8-digit grid-square code.

    Works on integer indices at 1/80 deg longitude x 1/120 deg latitude
    resolution, peeling digits from the fine end, mirroring the published
    integer coder for the scheme.
    """
    ilat = int(lat * 80 * 1.5)
    ilon = int(lon * 80 - 100.0 * 80)
    digits = []
    digits.append(ilon % 10)
    digits.append(ilat % 10)
    ilat //= 10
    ilon //= 10
    digits.append(ilon % 8)
    digits.append(ilat % 8)
    ilat //= 8
    ilon //= 8
    digits.append(ilon)
    digits.append(ilat)
    parts = [str(digits[5]), str(digits[4]), str(digits[3]), str(digits[2]), str(digits[1]), str(digits[0])]
    return parts[0].zfill(2) + parts[1].zfill(2) + parts[2] + parts[3] + parts[4] + parts[5]


def _random_points(n, seed):
    rng = random.Random(seed)
    return [(rng.uniform(24.0, 45.9), rng.uniform(123.0, 148.0)) for _ in range(n)]


def test_tokyo_station_prefix():
    g = encode_mesh(35.681236, 139.767125, MeshLevel.M250)
    assert g.id[:8] == "53394611"
    assert g.id[:8] == _reference_1km_code(35.681236, 139.767125)
    assert len(g.id) == 10
    g50 = encode_mesh(35.681236, 139.767125, MeshLevel.M50)
    assert len(g50.id) == 12


def test_1km_prefix_matches_reference_implementation():
    for lat, lon in _random_points(1000, 11):
        g = encode_mesh(lat, lon, MeshLevel.M250)
        assert g.id[:8] == _reference_1km_code(lat, lon), (lat, lon)


def test_cell_spans_are_exact():
    # Exact in rational arithmetic; corners are computed by two divisions,
    # so allow one ulp of wobble around 35-140 degrees.
    g = encode_mesh(35.681236, 139.767125, MeshLevel.M250)
    _, ring = decode_mesh(g)
    west, south = ring[0]
    east, north = ring[2]
    assert (north - south) == pytest.approx(7.5 * ARCSEC, abs=1e-13)
    assert (east - west) == pytest.approx(11.25 * ARCSEC, abs=1e-13)
    g50 = encode_mesh(35.681236, 139.767125, MeshLevel.M50)
    _, ring = decode_mesh(g50)
    assert (ring[2][1] - ring[0][1]) == pytest.approx(1.5 * ARCSEC, abs=1e-13)
    assert (ring[2][0] - ring[0][0]) == pytest.approx(2.25 * ARCSEC, abs=1e-13)


def test_sw_corner_belongs_to_cell():
    for level in MeshLevel:
        g = encode_mesh(35.5, 137.25, level)
        _, ring = decode_mesh(g)
        west, south = ring[0]
        assert encode_mesh(south, west, level) == g


@pytest.mark.parametrize("level", list(MeshLevel))
def test_decode_encode_round_trip(level):
    for lat, lon in _random_points(10_000, 23):
        g = encode_mesh(lat, lon, level)
        (clat, clon), ring = decode_mesh(g)
        assert encode_mesh(clat, clon, level) == g
        west, south = ring[0]
        east, north = ring[2]
        assert south <= lat < north and west <= lon < east
        assert ring[0] == ring[-1]


def test_parent_prefix_consistency():
    for lat, lon in _random_points(10_000, 31):
        g50 = encode_mesh(lat, lon, MeshLevel.M50)
        g250 = encode_mesh(lat, lon, MeshLevel.M250)
        assert g50.id[:10] == g250.id
        assert parent_250m(g50) == g250
    assert parent_250m(g250) == g250


@pytest.mark.parametrize(
    "text",
    ["533946113", "53394611324", "5339461102", "5339461150", "533946113252", "533946113225"],
)
def test_malformed_geocodes(text):
    with pytest.raises(ParseError):
        Geocode.from_string(text)


@pytest.mark.parametrize("lat,lon", [(-5.0, 139.0), (35.0, 90.0), (35.0, 180.0), (70.0, 139.0)])
def test_out_of_band_coordinates(lat, lon):
    with pytest.raises(UnsupportedRegionError):
        encode_mesh(lat, lon, MeshLevel.M50)


# --- aggregation -----------------------------------------------------------

BASE = (35.10, 136.90)


def _cell_point(row, col, jitter=0.5):
    """A point inside the 50m cell `row` cells north / `col` cells east of BASE."""
    ilat = math.floor(BASE[0] * 2400) + row
    ilon = math.floor((BASE[1] - 100.0) * 1600) + col
    return ((ilat + jitter) / 2400.0, 100.0 + (ilon + jitter) / 1600.0)


def _stays_at(row, col, users, stays_each=1, jitter=0.5):
    lat, lon = _cell_point(row, col, jitter)
    out = []
    for u in range(users):
        for s in range(stays_each):
            out.append(
                StayRecord(f"r{row}c{col}u{u}", lat, lon, datetime(2021, 4, 5 + s % 7, 9, 0), 60)
            )
    return out


def test_exactly_10_users_everywhere_yields_empty_table():
    table = aggregate(_stays_at(0, 0, users=10))
    assert len(table) == 0


def test_11_users_keeps_the_50m_mesh():
    table = aggregate(_stays_at(0, 0, users=11))
    assert len(table) == 1
    row = next(iter(table.rows.values()))
    assert row.geocode.level is MeshLevel.M50
    assert row.unique_users == 11


def test_25_single_user_cells_fall_back_to_one_250m_mesh():
    # All 25 cells of one 250m parent, one distinct user each.
    stays = []
    base_row = 0
    while (math.floor(BASE[0] * 2400) + base_row) % 5 != 0:
        base_row += 1
    base_col = 0
    while (math.floor((BASE[1] - 100.0) * 1600) + base_col) % 5 != 0:
        base_col += 1
    for dr in range(5):
        for dc in range(5):
            stays.extend(_stays_at(base_row + dr, base_col + dc, users=1))
    table = aggregate(stays)
    assert len(table) == 1
    row = next(iter(table.rows.values()))
    assert row.geocode.level is MeshLevel.M250
    assert row.unique_users == 25
    assert row.counts.sum() == 25


def test_empty_input_is_an_error():
    with pytest.raises(DataError):
        aggregate([])


def test_privacy_filter_fuzz():
    rng = random.Random(97)
    for trial in range(60):
        stays = []
        for _ in range(rng.randrange(1, 12)):
            row, col = rng.randrange(8), rng.randrange(8)
            users = rng.randrange(1, 25)
            stays.extend(_stays_at(row, col, users, stays_each=rng.randrange(1, 4)))
        table = aggregate(stays)
        for area in table.rows.values():
            assert area.unique_users >= 11


def test_conservation_and_uniqueness():
    rng = random.Random(5)
    stays = []
    for _ in range(30):
        row, col = rng.randrange(10), rng.randrange(10)
        stays.extend(_stays_at(row, col, users=rng.randrange(1, 20)))
    table = aggregate(stays)

    kept_50 = {gid for gid, r in table.rows.items() if r.geocode.level is MeshLevel.M50}
    kept_250 = {gid for gid, r in table.rows.items() if r.geocode.level is MeshLevel.M250}
    expected = 0
    for s in stays:
        g50 = encode_mesh(s.latitude, s.longitude, MeshLevel.M50)
        if g50.id in kept_50:
            expected += 1
        elif parent_250m(g50).id in kept_250:
            expected += 1
    counted = sum(int(r.counts.sum()) for r in table.rows.values())
    assert counted == expected
    # fine histogram and stays arrays agree with the class counts
    for r in table.rows.values():
        assert int(r.fine_counts.sum()) == int(r.counts.sum()) == len(r.stays)


def test_aggregate_deterministic():
    stays = _stays_at(0, 0, users=12) + _stays_at(3, 4, users=15)
    t1 = aggregate(stays)
    t2 = aggregate(stays)
    assert t1.ids() == t2.ids()
    for gid in t1.rows:
        assert np.array_equal(t1.rows[gid].counts, t2.rows[gid].counts)


def test_area_table_csv_round_trip(tmp_path):
    stays = _stays_at(0, 0, users=12, stays_each=3) + _stays_at(7, 2, users=13)
    table = aggregate(stays)
    path = tmp_path / "table.csv"
    write_area_table(path, table)
    back = read_area_table(path)
    assert back.ids() == table.ids()
    for gid in table.rows:
        assert np.array_equal(back.rows[gid].counts, table.rows[gid].counts)
        assert back.rows[gid].unique_users == table.rows[gid].unique_users
        assert back.rows[gid].geocode == table.rows[gid].geocode

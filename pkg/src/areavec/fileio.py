"""Release-style file formats: embedding record CSV, GeoJSON, profiles.

The embedding record CSV has columns ``geocode, latitude, longitude,
geometry, vector, cluster5, cluster10, cluster20`` followed by any extra
columns, which round-trip verbatim.  ``geometry`` is the cell's closed
5-corner ring flattened to ``[lon,lat,lon,lat,...]`` and ``vector`` the
8-dimensional embedding, both serialized as bracketed comma-separated
full-precision decimals inside one quoted field.  Cluster fields are blank
until a clustering has been attached; other cluster counts (say k=4) ride
along as extra ``cluster4`` columns.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .analysis import ClusterProfile
from .errors import ConfigError, DataError, ParseError
from .mesh import AreaTable, Geocode, decode_mesh
from .model import H

RECORD_COLUMNS = [
    "geocode",
    "latitude",
    "longitude",
    "geometry",
    "vector",
    "cluster5",
    "cluster10",
    "cluster20",
]

PROFILE_HEADER = ["cluster", "day_type", "slot", "duration_bin", "mean_visits"]


@dataclass
class EmbeddingRecordRow:
    geocode: str
    latitude: float
    longitude: float
    geometry: tuple[float, ...]  # flattened closed ring, 10 values
    vector: np.ndarray  # (8,)
    cluster5: int | None = None
    cluster10: int | None = None
    cluster20: int | None = None
    extras: dict[str, str] = field(default_factory=dict)

    def cluster_label(self, k: int) -> int | None:
        if k in (5, 10, 20):
            return getattr(self, f"cluster{k}")
        raw = self.extras.get(f"cluster{k}", "")
        return int(raw) if raw != "" else None

    def set_cluster_label(self, k: int, label: int) -> None:
        if k in (5, 10, 20):
            setattr(self, f"cluster{k}", label)
        else:
            self.extras[f"cluster{k}"] = str(label)


def _format_floats(values: Iterable[float]) -> str:
    return "[" + ",".join(repr(float(v)) for v in values) + "]"


def _parse_floats(text: str, expected: int, what: str, path, lineno: int) -> list[float]:
    text = text.strip()
    if not (text.startswith("[") and text.endswith("]")):
        raise ParseError(f"{what} must be a bracketed list, got {text!r}", path, lineno)
    parts = [p for p in text[1:-1].split(",") if p.strip()]
    if len(parts) != expected:
        raise ParseError(f"{what} has {len(parts)} values, expected {expected}", path, lineno)
    try:
        return [float(p) for p in parts]
    except ValueError as exc:
        raise ParseError(f"bad {what}: {exc}", path, lineno)


def rows_from_embeddings(embeddings: Mapping[str, np.ndarray]) -> list[EmbeddingRecordRow]:
    """Build record rows for geocode-keyed embeddings (geometry from the code)."""
    rows = []
    for gid in embeddings:
        g = Geocode.from_string(gid)
        (lat, lon), ring = decode_mesh(g)
        flat = tuple(v for corner in ring for v in corner)
        rows.append(
            EmbeddingRecordRow(
                geocode=gid,
                latitude=lat,
                longitude=lon,
                geometry=flat,
                vector=np.asarray(embeddings[gid], dtype=np.float64),
            )
        )
    return rows


def write_embedding_records(path, rows: Sequence[EmbeddingRecordRow]) -> None:
    extra_cols: list[str] = []
    for row in rows:
        for col in row.extras:
            if col not in extra_cols:
                extra_cols.append(col)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(RECORD_COLUMNS + extra_cols)
        for row in rows:
            writer.writerow(
                [
                    row.geocode,
                    repr(float(row.latitude)),
                    repr(float(row.longitude)),
                    _format_floats(row.geometry),
                    _format_floats(row.vector),
                    "" if row.cluster5 is None else row.cluster5,
                    "" if row.cluster10 is None else row.cluster10,
                    "" if row.cluster20 is None else row.cluster20,
                ]
                + [row.extras.get(col, "") for col in extra_cols]
            )


def read_embedding_records(path) -> tuple[dict[str, np.ndarray], list[EmbeddingRecordRow]]:
    """Read a record CSV; returns (embedding table, full rows)."""
    rows: list[EmbeddingRecordRow] = []
    table: dict[str, np.ndarray] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or header[: len(RECORD_COLUMNS)] != RECORD_COLUMNS:
            raise ParseError(f"expected columns {RECORD_COLUMNS} first", path, 1)
        extra_cols = header[len(RECORD_COLUMNS) :]
        for lineno, rec in enumerate(reader, start=2):
            if not rec:
                continue
            if len(rec) != len(header):
                raise ParseError(f"expected {len(header)} fields, got {len(rec)}", path, lineno)
            try:
                geometry = tuple(_parse_floats(rec[3], 10, "geometry", path, lineno))
                vector = np.array(_parse_floats(rec[4], H, "vector", path, lineno))
                clusters = [None if v == "" else int(v) for v in rec[5:8]]
            except ValueError as exc:
                raise ParseError(str(exc), path, lineno)
            row = EmbeddingRecordRow(
                geocode=rec[0],
                latitude=float(rec[1]),
                longitude=float(rec[2]),
                geometry=geometry,
                vector=vector,
                cluster5=clusters[0],
                cluster10=clusters[1],
                cluster20=clusters[2],
                extras=dict(zip(extra_cols, rec[len(RECORD_COLUMNS) :])),
            )
            rows.append(row)
            table[row.geocode] = row.vector
    return table, rows


def export_geojson(
    rows: Sequence[EmbeddingRecordRow],
    cluster_k: int | None = None,
) -> dict:
    """FeatureCollection of mesh polygons, optionally carrying cluster labels."""
    features = []
    for row in rows:
        ring = [
            [row.geometry[i], row.geometry[i + 1]] for i in range(0, len(row.geometry), 2)
        ]
        props: dict = {"geocode": row.geocode}
        if cluster_k is not None:
            label = row.cluster_label(cluster_k)
            if label is None:
                raise DataError(f"area {row.geocode} has no cluster{cluster_k} label")
            props["cluster"] = label
        features.append(
            {
                "type": "Feature",
                "geometry": {"type": "Polygon", "coordinates": [ring]},
                "properties": props,
            }
        )
    return {"type": "FeatureCollection", "features": features}


def export_table_geojson(table: AreaTable) -> dict:
    """FeatureCollection of an area table's cell polygons with user counts."""
    features = []
    for gid, row in table.rows.items():
        ring = [[lon, lat] for lon, lat in row.polygon]
        features.append(
            {
                "type": "Feature",
                "geometry": {"type": "Polygon", "coordinates": [ring]},
                "properties": {
                    "geocode": gid,
                    "level": row.geocode.level.value,
                    "unique_users": row.unique_users,
                },
            }
        )
    return {"type": "FeatureCollection", "features": features}


def write_geojson(path, collection: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(collection, fh)
        fh.write("\n")


def write_profile(path, profile: ClusterProfile) -> None:
    """CSV ``cluster,day_type,slot,duration_bin,mean_visits`` (zero cells skipped)."""
    k = len(profile.area_counts)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(PROFILE_HEADER)
        for c in range(k):
            for day in range(2):
                for slot in range(48):
                    for dbin in range(7):
                        value = profile.mean_visits[c, day, slot, dbin]
                        if value != 0.0:
                            writer.writerow([c, day, slot, dbin, repr(float(value))])


def read_profile(path) -> dict[tuple[int, int, int, int], float]:
    cells: dict[tuple[int, int, int, int], float] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != PROFILE_HEADER:
            raise ParseError(f"expected header {PROFILE_HEADER}", path, 1)
        for lineno, rec in enumerate(reader, start=2):
            if not rec:
                continue
            if len(rec) != 5:
                raise ParseError("expected 5 fields", path, lineno)
            try:
                cells[(int(rec[0]), int(rec[1]), int(rec[2]), int(rec[3]))] = float(rec[4])
            except ValueError as exc:
                raise ParseError(str(exc), path, lineno)
    return cells


# Duration-bin fill colors for the profile SVG, short stays light to long dark.
_SVG_COLORS = ["#c6dbef", "#9ecae1", "#6baed6", "#4292c6", "#2171b5", "#08519c", "#08306b"]


def profile_svg(profile: ClusterProfile) -> str:
    """Stacked-bar usage chart: one band per cluster, 96 slots (weekday+weekend)."""
    k = len(profile.area_counts)
    bar_w, band_h, pad = 8, 120, 30
    width = pad * 2 + bar_w * 96 + 20
    height = pad + k * (band_h + pad)
    peak = float(profile.mean_visits.sum(axis=3).max()) or 1.0
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
        '<style>text{font:10px sans-serif}</style>',
    ]
    for c in range(k):
        top = pad + c * (band_h + pad)
        parts.append(
            f'<text x="{pad}" y="{top - 6}">cluster {c} '
            f"({int(profile.area_counts[c])} areas)</text>"
        )
        for day in range(2):
            for slot in range(48):
                x = pad + (day * 48 + slot) * bar_w + day * 12
                y = top + band_h
                for dbin in range(7):
                    value = profile.mean_visits[c, day, slot, dbin]
                    if value <= 0:
                        continue
                    h = band_h * value / peak
                    y -= h
                    parts.append(
                        f'<rect x="{x}" y="{y:.2f}" width="{bar_w - 1}" height="{h:.2f}" '
                        f'fill="{_SVG_COLORS[dbin]}"/>'
                    )
        parts.append(
            f'<line x1="{pad}" y1="{top + band_h}" x2="{pad + 96 * bar_w + 12}" '
            f'y2="{top + band_h}" stroke="#333"/>'
        )
    parts.append("</svg>")
    return "\n".join(parts)

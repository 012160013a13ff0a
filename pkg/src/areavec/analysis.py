"""Clustering and downstream analysis of area embeddings.

k-means++ is implemented deterministically: seeding and Lloyd iterations
are driven by a single seeded generator, argmin ties go to the lowest
cluster index, an empty cluster is re-seeded at the point currently
farthest from its assigned centroid, and the final cluster numbering is
canonicalized by descending cluster size (ties by centroid lexicographic
order), so the same inputs always produce the same labels.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .errors import ConfigError, DataError
from .mesh import FINE_SHAPE, AreaTable, Geocode, MeshLevel, parent_250m
from .model import EmbeddingModel, cosine_similarity, predict_frequency

KMEANS_TOL = 1e-8
KMEANS_MAX_ITER = 300


@dataclass
class ClusterAssignment:
    k: int
    labels: dict[str, int]
    centroids: np.ndarray  # (k, 8)
    objective_history: list[float] = field(default_factory=list, repr=False)


@dataclass
class ClusterProfile:
    """Per-cluster mean visits per area, by day type x 30-min slot x duration bin."""

    mean_visits: np.ndarray  # (k, 2, 48, 7)
    area_counts: np.ndarray  # (k,) int


def _squared_distances(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    diff = points[:, None, :] - centroids[None, :, :]
    return np.einsum("nkd,nkd->nk", diff, diff)


def _seed_centroids(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(points)
    centroids = np.empty((k, points.shape[1]))
    centroids[0] = points[rng.integers(n)]
    d2 = ((points - centroids[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total > 0:
            idx = rng.choice(n, p=d2 / total)
        else:
            idx = rng.integers(n)
        centroids[j] = points[idx]
        d2 = np.minimum(d2, ((points - centroids[j]) ** 2).sum(axis=1))
    return centroids


def kmeanspp_cluster(
    embeddings: Mapping[str, np.ndarray], k: int, seed: int
) -> ClusterAssignment:
    """k-means++ seeding followed by Lloyd iterations to convergence."""
    if k < 1:
        raise ConfigError(f"k must be >= 1, got {k}")
    if k > len(embeddings):
        raise ConfigError(f"k={k} exceeds {len(embeddings)} areas")
    ids = sorted(embeddings)
    points = np.stack([np.asarray(embeddings[a], dtype=np.float64) for a in ids])

    rng = np.random.default_rng(seed)
    centroids = _seed_centroids(points, k, rng)

    history = []
    labels = np.zeros(len(points), dtype=np.intp)
    for _ in range(KMEANS_MAX_ITER):
        d2 = _squared_distances(points, centroids)
        labels = d2.argmin(axis=1)

        # Re-seed empty clusters at the globally worst-fit point.
        used: set[int] = set()
        for j in range(k):
            if np.any(labels == j):
                continue
            assigned = d2[np.arange(len(points)), labels].copy()
            assigned[list(used)] = -np.inf
            far = int(assigned.argmax())
            used.add(far)
            centroids[j] = points[far]
            labels[far] = j
            d2[:, j] = ((points - centroids[j]) ** 2).sum(axis=1)

        history.append(float(d2[np.arange(len(points)), labels].sum()))

        new_centroids = np.stack([points[labels == j].mean(axis=0) for j in range(k)])
        shift = float(np.abs(new_centroids - centroids).max())
        centroids = new_centroids
        if shift < KMEANS_TOL:
            break

    d2 = _squared_distances(points, centroids)
    labels = d2.argmin(axis=1)
    history.append(float(d2[np.arange(len(points)), labels].sum()))

    # Canonical numbering: biggest cluster first, centroid order breaks ties.
    sizes = np.bincount(labels, minlength=k)
    order = sorted(range(k), key=lambda j: (-sizes[j], tuple(centroids[j])))
    remap = {old: new for new, old in enumerate(order)}
    return ClusterAssignment(
        k=k,
        labels={a: remap[int(l)] for a, l in zip(ids, labels)},
        centroids=centroids[order],
        objective_history=history,
    )


def cluster_profile(assign: ClusterAssignment, table: AreaTable) -> ClusterProfile:
    """Average each cluster's fine stay histogram over its member areas."""
    sums = np.zeros((assign.k,) + FINE_SHAPE, dtype=np.float64)
    counts = np.zeros(assign.k, dtype=np.int64)
    for gid, label in assign.labels.items():
        if gid not in table.rows:
            raise KeyError(f"area {gid!r} missing from table")
        sums[label] += table.rows[gid].fine_counts
        counts[label] += 1
    safe = np.maximum(counts, 1)
    return ClusterProfile(mean_visits=sums / safe[:, None, None, None], area_counts=counts)


def similar_areas(
    embeddings: Mapping[str, np.ndarray], query: str, threshold: float
) -> list[tuple[str, float]]:
    """Areas at cosine similarity >= threshold to the query, most similar first."""
    if not -1.0 <= threshold <= 1.0:
        raise ConfigError(f"threshold {threshold} outside [-1, 1]")
    if query not in embeddings:
        raise KeyError(f"unknown area {query!r}")
    q = np.asarray(embeddings[query], dtype=np.float64)
    hits = []
    for aid, vec in embeddings.items():
        if aid == query:
            continue
        sim = cosine_similarity(q, np.asarray(vec, dtype=np.float64))
        if sim >= threshold:
            hits.append((aid, sim))
    hits.sort(key=lambda item: (-item[1], item[0]))
    return hits


def resolve_embedding(embeddings: Mapping[str, np.ndarray], g: Geocode) -> np.ndarray:
    """Embedding for a mesh, falling back from 50 m to its 250 m parent."""
    if g.id in embeddings:
        return np.asarray(embeddings[g.id]).copy()
    if g.level is MeshLevel.M50:
        parent = parent_250m(g).id
        if parent in embeddings:
            return np.asarray(embeddings[parent]).copy()
    raise KeyError(f"no embedding for {g.id} or its 250m parent")


def approximate_trend(model: EmbeddingModel, area_row: int) -> np.ndarray:
    """Reconstructed stay-class distribution for an area (see predict_frequency)."""
    return predict_frequency(model, area_row)

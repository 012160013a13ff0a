"""Anchor sets, anchored training, and misalignment between embedding tables.

Embeddings trained independently land in arbitrary bases: two runs on the
same data are mutually incomparable.  Anchors fix this.  An anchor is a
pseudo-area with (a) a corpus of quantized stay records sampled from one
cluster of a diverse training corpus and (b) a fixed reference embedding.
Training a new dataset together with the anchors, with the anchor rows
frozen at their references, pins the latent space so that independently
trained datasets become directly comparable.

The anchor loss is mixed in as ``(1-p)*Loss_data + p*Loss_anchor`` where the
anchoring power ``p`` follows the configured schedule: ``exponential``
decays from ``beta`` at the start of training to ``alpha`` at the end
(``p = exp((t/T)(ln alpha - ln beta) + ln beta)``), ``constant`` holds
``alpha`` throughout, and ``mixed`` skips the weighting entirely and
shuffles anchors into the ordinary batches.  The power updates once per
epoch.

Anchor records carry a week position (minutes since Monday 00:00) instead
of calendar dates, floored to 15-minute steps; Saturday/Sunday positions
count as weekend and holidays are not representable in anchor data.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, replace
from enum import Enum
from itertools import combinations
from typing import Mapping, Sequence

import numpy as np

from .analysis import kmeanspp_cluster
from .errors import ConfigError, DataError, ParseError
from .mesh import AreaTable
from .model import (
    H,
    EmbeddingModel,
    TrainConfig,
    _extract_counts,
    _sgd,
    approximation_loss,
    cosine_similarity,
    normalize_counts,
    train,
)
from .stays import DURATION_BIN_EDGES, MINUTES_PER_DAY, MINUTES_PER_WEEK, N_CLASSES

logger = logging.getLogger(__name__)

QUANTUM_MINUTES = 15
DEFAULT_N_ANCHORS = 512
DEFAULT_RECORDS_PER_ANCHOR = 20_000

ANCHOR_RECORD_HEADER = ["anchor_id", "arrival_time", "stay_time"]
ANCHOR_EMBEDDING_HEADER = ["anchor_id"] + [f"v{i}" for i in range(H)]


class ScheduleKind(Enum):
    NONE = "none"
    MIXED = "mixed"
    CONSTANT = "constant"
    EXPONENTIAL = "exponential"


@dataclass(frozen=True)
class AnchorSchedule:
    kind: ScheduleKind = ScheduleKind.EXPONENTIAL
    alpha: float = 0.3
    beta: float = 1.0

    def __post_init__(self):
        if self.kind in (ScheduleKind.CONSTANT, ScheduleKind.EXPONENTIAL):
            if not 0.0 < self.alpha <= 1.0:
                raise ConfigError(f"alpha must be in (0, 1], got {self.alpha}")
            if not 0.0 < self.beta <= 1.0:
                raise ConfigError(f"beta must be in (0, 1], got {self.beta}")
        if self.kind is ScheduleKind.EXPONENTIAL and self.alpha > self.beta:
            raise ConfigError(f"need alpha <= beta, got {self.alpha} > {self.beta}")


def anchoring_power(t: int, total_epochs: int, sched: AnchorSchedule) -> float:
    """Anchor-loss weight at epoch ``t`` of ``total_epochs``."""
    if total_epochs < 1:
        raise ConfigError(f"total_epochs must be >= 1, got {total_epochs}")
    if not 0 <= t <= total_epochs:
        raise ConfigError(f"epoch {t} outside 0..{total_epochs}")
    if sched.kind is ScheduleKind.NONE:
        return 0.0
    if sched.kind is ScheduleKind.MIXED:
        raise ConfigError("mixed schedule has no anchoring power; anchors join the data pool")
    if sched.kind is ScheduleKind.CONSTANT:
        return sched.alpha
    frac = t / total_epochs
    return math.exp(frac * (math.log(sched.alpha) - math.log(sched.beta)) + math.log(sched.beta))


@dataclass
class AnchorSet:
    """Anchor records plus (once computed) their fixed reference embeddings.

    ``records`` maps anchor index -> (n, 2) int array of
    (arrival week-minute, stay minutes), all values multiples of 15.
    ``source_embeddings`` holds the corpus areas' positions in the joint
    embedding that fixed the references; re-anchored runs can be compared
    against it.  It is in-memory only (not part of the release files).
    """

    records: dict[int, np.ndarray]
    reference_embeddings: np.ndarray | None = None
    source_embeddings: dict[str, np.ndarray] | None = None

    def __post_init__(self):
        for aid, recs in self.records.items():
            recs = np.asarray(recs, dtype=np.int64)
            if recs.ndim != 2 or recs.shape[1] != 2:
                raise DataError(f"anchor {aid}: records must be (n, 2)")
            if np.any(recs % QUANTUM_MINUTES != 0):
                raise DataError(f"anchor {aid}: values must be multiples of {QUANTUM_MINUTES}")
            if np.any(recs[:, 0] < 0) or np.any(recs[:, 0] >= MINUTES_PER_WEEK):
                raise DataError(f"anchor {aid}: arrival outside 0..{MINUTES_PER_WEEK - 1}")
            if np.any(recs[:, 1] < 0):
                raise DataError(f"anchor {aid}: negative stay time")
            self.records[aid] = recs
        if self.reference_embeddings is not None:
            refs = np.asarray(self.reference_embeddings, dtype=np.float64)
            if refs.shape != (len(self.records), H):
                raise ConfigError(
                    f"reference embeddings shape {refs.shape} != ({len(self.records)}, {H})"
                )
            self.reference_embeddings = refs

    @property
    def n_anchors(self) -> int:
        return len(self.records)

    def anchor_ids(self) -> list[str]:
        return [f"a{aid}" for aid in sorted(self.records)]

    def count_matrix(self) -> np.ndarray:
        """(n_anchors, 168) histogram of each anchor's records."""
        rows = []
        for aid in sorted(self.records):
            idx = stay_class_indices(self.records[aid])
            rows.append(np.bincount(idx, minlength=N_CLASSES))
        return np.stack(rows).astype(np.float64)


def stay_class_indices(records: np.ndarray) -> np.ndarray:
    """Class indices for (week_minute, duration) rows; weekend is structural."""
    records = np.asarray(records, dtype=np.int64)
    day = records[:, 0] // MINUTES_PER_DAY
    weekend = (day >= 5).astype(np.int64)
    arrival_bin = (records[:, 0] % MINUTES_PER_DAY) // 120
    duration_bin = np.searchsorted(DURATION_BIN_EDGES, records[:, 1], side="right")
    return weekend * 84 + arrival_bin * 7 + duration_bin


def quantize_records(records: np.ndarray) -> np.ndarray:
    """Floor arrival and duration to 15-minute steps."""
    records = np.asarray(records, dtype=np.int64)
    return (records // QUANTUM_MINUTES) * QUANTUM_MINUTES


def generate_anchor_set(
    combined: AreaTable,
    n: int = DEFAULT_N_ANCHORS,
    records_per_anchor: int = DEFAULT_RECORDS_PER_ANCHOR,
    cfg: TrainConfig | None = None,
) -> AnchorSet:
    """Build anchors from a diverse corpus: embed, cluster, sample, retrain.

    Steps: train the corpus without anchors; k-means++ the embeddings into
    ``n`` clusters; sample ``records_per_anchor`` stays uniformly from each
    cluster's areas (with replacement only when the cluster holds fewer);
    floor the samples to 15-minute steps; retrain on corpus + anchor
    pseudo-areas and freeze each anchor's learned embedding as its
    reference.
    """
    cfg = cfg or TrainConfig()
    if n < 1 or records_per_anchor < 1:
        raise ConfigError("n and records_per_anchor must be >= 1")
    if n > len(combined):
        raise ConfigError(f"{n} anchors requested but only {len(combined)} areas available")
    missing = [gid for gid, row in combined.rows.items() if row.stays is None]
    if missing:
        raise DataError(
            f"table rows lack source stays (loaded from CSV?): {missing[:3]}"
        )

    seeds = np.random.SeedSequence(cfg.rng_seed).generate_state(4)
    base = train(combined, replace(cfg, rng_seed=int(seeds[0]), schedule=None))
    embeddings = base.embedding_table()

    assignment = None
    for attempt in range(10):
        assignment = kmeanspp_cluster(embeddings, n, seed=int(seeds[1]) + attempt)
        sizes = np.bincount(list(assignment.labels.values()), minlength=n)
        if np.all(sizes > 0):
            break
        logger.warning("k-means produced an empty cluster (attempt %d); reseeding", attempt + 1)
    else:
        n = int(np.count_nonzero(sizes))
        logger.warning("reducing anchor count to %d non-empty clusters", n)
        assignment = kmeanspp_cluster(embeddings, n, seed=int(seeds[1]))

    members: dict[int, list[str]] = {j: [] for j in range(n)}
    for gid, label in assignment.labels.items():
        members[label].append(gid)

    rng = np.random.default_rng(int(seeds[2]))
    records: dict[int, np.ndarray] = {}
    for j in range(n):
        pool = np.concatenate([combined.rows[gid].stays for gid in members[j]])
        pick = rng.choice(len(pool), size=records_per_anchor, replace=len(pool) < records_per_anchor)
        records[j] = quantize_records(pool[pick])

    anchor_set = AnchorSet(records=records)
    plus_data: dict[str, np.ndarray] = {
        aid: counts
        for aid, counts in zip(anchor_set.anchor_ids(), anchor_set.count_matrix())
    }
    for gid, row in combined.rows.items():
        plus_data[gid] = row.counts.astype(np.float64)
    plus = train(plus_data, replace(cfg, rng_seed=int(seeds[3]), schedule=None))
    refs = np.stack([plus.W[plus.row_of(aid)] for aid in anchor_set.anchor_ids()])
    anchor_set.reference_embeddings = refs
    anchor_set.source_embeddings = {
        gid: plus.W[plus.row_of(gid)].copy() for gid in combined.rows
    }
    return anchor_set


def _train_anchored_model(data, anchors: AnchorSet | None, cfg: TrainConfig) -> EmbeddingModel:
    sched = cfg.schedule or AnchorSchedule(ScheduleKind.NONE)
    if anchors is None or anchors.n_anchors == 0 or sched.kind is ScheduleKind.NONE:
        return train(data, cfg)
    if anchors.reference_embeddings is None:
        raise ConfigError("anchor set has no reference embeddings yet")
    if anchors.reference_embeddings.shape[1] != H:
        raise ConfigError(
            f"anchor embedding width {anchors.reference_embeddings.shape[1]} != {H}"
        )
    ids, counts = _extract_counts(data)
    freqs = normalize_counts(counts)
    anchor_freqs = normalize_counts(anchors.count_matrix())
    if sched.kind is ScheduleKind.MIXED:
        return _sgd(
            ids,
            freqs,
            cfg,
            anchor_ids=anchors.anchor_ids(),
            anchor_w=anchors.reference_embeddings,
            anchor_freqs=anchor_freqs,
            mixed=True,
        )
    return _sgd(
        ids,
        freqs,
        cfg,
        anchor_ids=anchors.anchor_ids(),
        anchor_w=anchors.reference_embeddings,
        anchor_freqs=anchor_freqs,
        power_fn=lambda t, total: anchoring_power(t, total, sched),
    )


def train_anchored(data, anchors: AnchorSet | None, cfg: TrainConfig) -> dict[str, np.ndarray]:
    """Train with frozen anchors; returns the data areas' embedding table."""
    model = _train_anchored_model(data, anchors, cfg)
    anchor_ids = set(anchors.anchor_ids()) if anchors is not None else set()
    return {
        aid: model.W[i].copy()
        for i, aid in enumerate(model.area_ids)
        if aid not in anchor_ids
    }


class Metric(Enum):
    EUCLIDEAN = "euclidean"
    COSINE = "cosine"


def misalignment(
    table: Mapping[str, np.ndarray],
    reference: Mapping[str, np.ndarray],
    metric: Metric = Metric.EUCLIDEAN,
) -> float:
    """Mean per-area distance between two embedding tables of the same areas."""
    missing = sorted(set(reference) - set(table))
    extra = sorted(set(table) - set(reference))
    if missing or extra:
        raise DataError(
            f"area sets differ: {len(missing)} only in reference ({missing[:3]}...), "
            f"{len(extra)} only in table ({extra[:3]}...)"
        )
    if not table:
        raise DataError("empty embedding tables")
    total = 0.0
    for aid, vec in table.items():
        ref = reference[aid]
        if metric is Metric.EUCLIDEAN:
            total += float(np.linalg.norm(np.asarray(vec) - np.asarray(ref)))
        else:
            total += 1.0 - cosine_similarity(np.asarray(vec), np.asarray(ref))
    return total / len(table)


@dataclass
class PairResult:
    seed_a: int
    seed_b: int
    condition: str  # "anchored" | "unanchored"
    euclidean: float
    cosine: float


@dataclass
class RunResult:
    seed: int
    condition: str
    approximation_loss: float


@dataclass
class ValidationReport:
    pairs: list[PairResult]
    runs: list[RunResult]

    def mean_misalignment(self, condition: str, metric: Metric) -> float:
        vals = [
            p.euclidean if metric is Metric.EUCLIDEAN else p.cosine
            for p in self.pairs
            if p.condition == condition
        ]
        return float(np.mean(vals))

    def mean_approximation_loss(self, condition: str) -> float:
        return float(np.mean([r.approximation_loss for r in self.runs if r.condition == condition]))

    def to_dict(self) -> dict:
        return {
            "pairs": [vars(p) for p in self.pairs],
            "runs": [vars(r) for r in self.runs],
        }


def run_validation_experiment(
    table: AreaTable,
    anchors: AnchorSet,
    seeds: Sequence[int],
    cfg: TrainConfig | None = None,
) -> ValidationReport:
    """Train the same table repeatedly with and without anchoring.

    For every seed pair the report carries the misalignment between the two
    runs under each condition (both metrics), and for every run the
    approximation loss, so anchored and unanchored reproducibility can be
    compared directly.
    """
    if len(seeds) < 2:
        raise ConfigError("need at least 2 seeds")
    cfg = cfg or TrainConfig()
    if cfg.schedule is None or cfg.schedule.kind is ScheduleKind.NONE:
        cfg = replace(cfg, schedule=AnchorSchedule(ScheduleKind.EXPONENTIAL))

    anchored_tables: dict[int, dict[str, np.ndarray]] = {}
    runs = []
    for seed in seeds:
        run_cfg = replace(cfg, rng_seed=seed)
        model = _train_anchored_model(table, anchors, run_cfg)
        anchored_tables[seed] = {
            gid: model.W[model.row_of(gid)].copy() for gid in table.rows
        }
        runs.append(RunResult(seed, "anchored", approximation_loss(model, table)))

    plain_tables: dict[int, dict[str, np.ndarray]] = {}
    for seed in seeds:
        model = train(table, replace(cfg, rng_seed=seed, schedule=None))
        plain_tables[seed] = model.embedding_table()
        runs.append(RunResult(seed, "unanchored", approximation_loss(model, table)))

    pairs = []
    for sa, sb in combinations(seeds, 2):
        for condition, tables in (("anchored", anchored_tables), ("unanchored", plain_tables)):
            pairs.append(
                PairResult(
                    seed_a=sa,
                    seed_b=sb,
                    condition=condition,
                    euclidean=misalignment(tables[sa], tables[sb], Metric.EUCLIDEAN),
                    cosine=misalignment(tables[sa], tables[sb], Metric.COSINE),
                )
            )
    return ValidationReport(pairs=pairs, runs=runs)


@dataclass
class SweepGrid:
    """Configuration grid for the three anchoring studies.

    ``realizations`` controls how many independently sampled anchor sets
    are averaged per size-study cell; anchor sampling noise is frozen into
    each set, so averaging realizations (not just run seeds) is what
    smooths it.
    """

    n_anchors: Sequence[int] = (16, 64, 256)
    records_per_anchor: Sequence[int] = (1_000, 5_000, 20_000)
    schedules: Sequence[ScheduleKind] = (
        ScheduleKind.MIXED,
        ScheduleKind.CONSTANT,
        ScheduleKind.EXPONENTIAL,
    )
    alphas: Sequence[float] = (0.1, 0.3, 0.6)
    seeds: Sequence[int] = (11, 12, 13)
    schedule_n_anchors: int = 64
    schedule_records: int = 5_000
    realizations: int = 2


def _runs_vs_reference(
    table: AreaTable,
    anchors: AnchorSet,
    seeds: Sequence[int],
    cfg: TrainConfig,
) -> list[dict]:
    """Re-anchor the table once per seed and compare each run to the joint
    embedding that fixed the anchors."""
    if anchors.source_embeddings is None:
        raise ConfigError("anchor set carries no source embeddings")
    shared = [gid for gid in table.rows if gid in anchors.source_embeddings]
    if not shared:
        raise DataError("table shares no areas with the anchor source embedding")
    reference = {gid: anchors.source_embeddings[gid] for gid in shared}
    out = []
    for seed in seeds:
        model = _train_anchored_model(table, anchors, replace(cfg, rng_seed=seed))
        run = {gid: model.W[model.row_of(gid)].copy() for gid in shared}
        out.append(
            {
                "seed": seed,
                "euclidean": misalignment(run, reference, Metric.EUCLIDEAN),
                "cosine": misalignment(run, reference, Metric.COSINE),
                "approximation_loss": approximation_loss(model, table),
            }
        )
    return out


def run_appendix_sweeps(
    combined: AreaTable,
    grid: SweepGrid | None = None,
    cfg: TrainConfig | None = None,
    studies: Sequence[str] = ("size", "schedule", "alpha"),
) -> dict:
    """Three desk-scale studies of the anchoring hyper-parameters.

    ``size``: misalignment and approximation loss across an anchor-count x
    records-per-anchor grid.  ``schedule``: mixed vs. constant vs.
    exponential weighting on one fixed anchor set.  ``alpha``: the final
    anchoring power's effect on both metrics.  Misalignment here is the
    distance between each re-anchored run and the joint embedding that
    fixed the anchors, averaged over seeds.  Results come back as a plain
    dict ready for JSON serialization.
    """
    grid = grid or SweepGrid()
    cfg = cfg or TrainConfig()
    report: dict = {}

    def summarize(runs: list[dict]) -> dict:
        return {
            "runs": runs,
            "misalignment_euclidean": float(np.mean([r["euclidean"] for r in runs])),
            "misalignment_cosine": float(np.mean([r["cosine"] for r in runs])),
            "approximation_loss": float(np.mean([r["approximation_loss"] for r in runs])),
        }

    if "size" in studies:
        rows = []
        sched_cfg = replace(cfg, schedule=AnchorSchedule(ScheduleKind.EXPONENTIAL))
        for n in grid.n_anchors:
            for rec in grid.records_per_anchor:
                runs = []
                for r in range(grid.realizations):
                    gen_cfg = replace(cfg, rng_seed=cfg.rng_seed + 7919 * r)
                    anchors = generate_anchor_set(combined, n, rec, gen_cfg)
                    runs.extend(_runs_vs_reference(combined, anchors, grid.seeds, sched_cfg))
                row = summarize(runs)
                row.update(n_anchors=n, records_per_anchor=rec, total_records=n * rec)
                rows.append(row)
                logger.info(
                    "size study n=%d records=%d: euclidean=%.4f", n, rec,
                    row["misalignment_euclidean"],
                )
        report["size"] = rows

    if "schedule" in studies or "alpha" in studies:
        anchors = generate_anchor_set(
            combined, grid.schedule_n_anchors, grid.schedule_records, cfg
        )

    if "schedule" in studies:
        rows = []
        for kind in grid.schedules:
            sched_cfg = replace(cfg, schedule=AnchorSchedule(kind))
            row = summarize(_runs_vs_reference(combined, anchors, grid.seeds, sched_cfg))
            row["schedule"] = kind.value
            rows.append(row)
        report["schedule"] = rows

    if "alpha" in studies:
        rows = []
        for alpha in grid.alphas:
            sched_cfg = replace(
                cfg, schedule=AnchorSchedule(ScheduleKind.EXPONENTIAL, alpha=alpha)
            )
            row = summarize(_runs_vs_reference(combined, anchors, grid.seeds, sched_cfg))
            row["alpha"] = alpha
            rows.append(row)
        report["alpha"] = rows

    return report


def write_anchor_records(path, anchors: AnchorSet) -> None:
    """CSV ``anchor_id,arrival_time,stay_time``; times in minutes, step 15."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(ANCHOR_RECORD_HEADER)
        for aid in sorted(anchors.records):
            for arrival, stay in anchors.records[aid]:
                writer.writerow([aid, int(arrival), int(stay)])


def read_anchor_records(path) -> AnchorSet:
    records: dict[int, list] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ANCHOR_RECORD_HEADER:
            raise ParseError(f"expected header {ANCHOR_RECORD_HEADER}", path, 1)
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 3:
                raise ParseError("expected 3 fields", path, lineno)
            try:
                records.setdefault(int(row[0]), []).append((int(row[1]), int(row[2])))
            except ValueError as exc:
                raise ParseError(str(exc), path, lineno)
    if not records:
        raise DataError(f"{path}: no anchor records")
    return AnchorSet(
        records={aid: np.array(rows, dtype=np.int64) for aid, rows in records.items()}
    )


def write_anchor_embeddings(path, anchors: AnchorSet) -> None:
    if anchors.reference_embeddings is None:
        raise ConfigError("anchor set has no reference embeddings to write")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(ANCHOR_EMBEDDING_HEADER)
        for i, aid in enumerate(sorted(anchors.records)):
            writer.writerow([aid] + [repr(float(v)) for v in anchors.reference_embeddings[i]])


def read_anchor_embeddings(path) -> dict[int, np.ndarray]:
    out: dict[int, np.ndarray] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ANCHOR_EMBEDDING_HEADER:
            raise ParseError(f"expected header {ANCHOR_EMBEDDING_HEADER}", path, 1)
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 1 + H:
                raise ParseError(f"expected anchor_id + {H} values", path, lineno)
            try:
                out[int(row[0])] = np.array([float(v) for v in row[1:]])
            except ValueError as exc:
                raise ParseError(str(exc), path, lineno)
    return out

"""The shallow area-embedding model and its SGD trainer.

The model is a softmax regression from a one-hot area id to the 168
discretized stay classes: an ``|areas| x 8`` input matrix ``W`` (each row is
one area's embedding) and an ``8 x 168`` output matrix ``W_out``.  For area
row ``m`` the predicted class distribution is ``softmax(W[m] @ W_out)`` and
training minimizes the cross-entropy against the area's empirical class
frequencies.

Training operates on the aggregated per-area count matrix rather than on
individual stay records: the cross-entropy of an area's frequency vector
equals the mean one-hot cross-entropy over that area's records, so the
aggregation is lossless and the per-epoch cost is O(areas), not O(records).

The optimizer is plain mini-batch SGD with a linearly decaying learning
rate (down to 10% of the initial rate).  Rows listed in ``frozen_rows``
never receive updates; anchored training freezes anchor rows this way and
mixes a separately weighted anchor batch into every step (see
:mod:`areavec.anchors`).  All randomness flows from the config seed, so a
run is bit-reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import TYPE_CHECKING, Callable, Mapping, Sequence

import numpy as np

from .errors import ConfigError, DataError, DivergenceError, ParseError
from .mesh import AreaTable
from .stays import N_CLASSES

if TYPE_CHECKING:
    from .anchors import AnchorSchedule

H = 8  # embedding width


@dataclass
class TrainConfig:
    epochs: int = 600
    learning_rate: float = 4.0
    batch_areas: int = 256
    rng_seed: int = 0
    schedule: "AnchorSchedule | None" = None

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if not self.learning_rate > 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.batch_areas < 1:
            raise ConfigError(f"batch_areas must be >= 1, got {self.batch_areas}")


@dataclass
class EmbeddingModel:
    area_ids: list[str]
    W: np.ndarray  # (|areas|, 8)
    W_out: np.ndarray  # (8, 168)
    frozen_rows: frozenset[int] = field(default_factory=frozenset)
    loss_history: list[float] = field(default_factory=list, repr=False)

    def row_of(self, area_id: str) -> int:
        index = self._index()
        if area_id not in index:
            raise KeyError(f"area {area_id!r} not in model")
        return index[area_id]

    def _index(self) -> dict[str, int]:
        if not hasattr(self, "_row_index"):
            self._row_index = {a: i for i, a in enumerate(self.area_ids)}
        return self._row_index

    def embedding_table(self) -> dict[str, np.ndarray]:
        """area_id -> embedding vector, copying the rows."""
        return {a: self.W[i].copy() for i, a in enumerate(self.area_ids)}


def softmax_rows(z: np.ndarray) -> np.ndarray:
    """Row-wise softmax with max-logit subtraction."""
    z = np.asarray(z, dtype=np.float64)
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _log_softmax_rows(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def predict_frequency(model: EmbeddingModel, area_row: int) -> np.ndarray:
    """Predicted 168-class distribution for one area row."""
    if not 0 <= area_row < len(model.area_ids):
        raise ConfigError(f"row {area_row} outside 0..{len(model.area_ids) - 1}")
    return softmax_rows(model.W[area_row] @ model.W_out)


def normalize_counts(counts: np.ndarray) -> np.ndarray:
    """Counts (or weights) -> frequency rows summing to 1."""
    counts = np.asarray(counts, dtype=np.float64)
    sums = counts.sum(axis=-1, keepdims=True)
    if np.any(sums <= 0):
        raise DataError("count vector with zero total")
    return counts / sums


def batch_loss_grads(
    w_rows: np.ndarray, w_out: np.ndarray, freqs: np.ndarray
) -> tuple[float, np.ndarray, np.ndarray]:
    """Mean cross-entropy over a batch of areas and its analytic gradients.

    Returns ``(loss, d_loss/d_w_rows, d_loss/d_w_out)``.
    """
    w_rows = np.atleast_2d(w_rows)
    freqs = np.atleast_2d(freqs)
    b = w_rows.shape[0]
    z = w_rows @ w_out
    log_p = _log_softmax_rows(z)
    loss = float(-(freqs * log_p).sum() / b)
    dz = (np.exp(log_p) - freqs) / b
    return loss, dz @ w_out.T, w_rows.T @ dz


def anchored_loss_grads(
    w_data: np.ndarray,
    w_anchor: np.ndarray,
    w_out: np.ndarray,
    freqs_data: np.ndarray,
    freqs_anchor: np.ndarray,
    p: float,
) -> tuple[float, np.ndarray, np.ndarray]:
    """Combined loss ``(1-p)*L_data + p*L_anchor`` and its gradients.

    Anchor rows are frozen by contract, so only the data-row gradient and
    the shared output-matrix gradient are returned.
    """
    loss_d, gw_d, gout_d = batch_loss_grads(w_data, w_out, freqs_data)
    loss_a, _, gout_a = batch_loss_grads(w_anchor, w_out, freqs_anchor)
    loss = (1.0 - p) * loss_d + p * loss_a
    return loss, (1.0 - p) * gw_d, (1.0 - p) * gout_d + p * gout_a


def loss_and_gradients(
    model: EmbeddingModel, batch: Sequence[tuple[int, np.ndarray]]
) -> tuple[float, np.ndarray, np.ndarray]:
    """Loss and gradients for an explicit (row, frequency) batch.

    Gradient rows are reported for frozen rows too; appliers must skip them.
    """
    if not batch:
        raise DataError("empty batch")
    rows = np.array([r for r, _ in batch], dtype=np.intp)
    freqs = np.stack([np.asarray(f, dtype=np.float64) for _, f in batch])
    return batch_loss_grads(model.W[rows], model.W_out, freqs)


def _extract_counts(data) -> tuple[list[str], np.ndarray]:
    if isinstance(data, AreaTable):
        ids, counts = data.counts_matrix()
    elif isinstance(data, Mapping):
        ids = list(data)
        counts = np.stack([np.asarray(data[a], dtype=np.float64) for a in ids])
    else:
        raise ConfigError(f"cannot train on {type(data).__name__}")
    if not ids:
        raise DataError("no areas to train on")
    if counts.shape[1] != N_CLASSES:
        raise DataError(f"count vectors must have {N_CLASSES} columns")
    zero = [ids[i] for i in np.flatnonzero(counts.sum(axis=1) <= 0)]
    if zero:
        raise DataError(f"areas with all-zero counts: {zero[:5]}")
    return ids, counts


def _anchor_chunks(n_anchors: int, size: int, rng: np.random.Generator):
    """Endless stream of anchor-row index chunks, reshuffled per pass."""
    if n_anchors <= size:
        block = np.arange(n_anchors)
        while True:
            yield block
    while True:
        order = rng.permutation(n_anchors)
        for start in range(0, n_anchors - size + 1, size):
            yield order[start : start + size]


def _sgd(
    area_ids: list[str],
    freqs: np.ndarray,
    cfg: TrainConfig,
    *,
    anchor_ids: list[str] | None = None,
    anchor_w: np.ndarray | None = None,
    anchor_freqs: np.ndarray | None = None,
    mixed: bool = False,
    power_fn: Callable[[int, int], float] | None = None,
) -> EmbeddingModel:
    """Shared SGD loop behind plain and anchored training.

    When an anchor block is given, its rows sit after the data rows, start
    at the reference embeddings, and never update.  ``mixed`` shuffles the
    anchors into the ordinary batch pool with no loss weighting; otherwise
    each step combines one data batch and one anchor batch, the latter
    weighted by ``power_fn(epoch, epochs)``.

    Data shuffling, initialization, and anchor-batch order draw from three
    independent streams spawned off the config seed, so training without
    anchors follows the identical data-side trajectory as anchored training
    with power 0.
    """
    ss = np.random.SeedSequence(cfg.rng_seed)
    ss_init, ss_data, ss_anchor = ss.spawn(3)
    rng_init = np.random.default_rng(ss_init)
    rng_data = np.random.default_rng(ss_data)

    n_data = len(area_ids)
    w = rng_init.uniform(-0.5 / H, 0.5 / H, size=(n_data, H))
    w_out = np.zeros((H, N_CLASSES))
    pool = freqs
    frozen: frozenset[int] = frozenset()
    all_ids = list(area_ids)

    n_anchors = 0 if anchor_freqs is None else len(anchor_freqs)
    if n_anchors:
        w = np.vstack([w, anchor_w])
        frozen = frozenset(range(n_data, n_data + n_anchors))
        all_ids = all_ids + list(anchor_ids)
        if mixed:
            pool = np.vstack([freqs, anchor_freqs])
        else:
            rng_anchor = np.random.default_rng(ss_anchor)
            anchor_stream = _anchor_chunks(
                n_anchors, min(cfg.batch_areas, n_anchors), rng_anchor
            )

    frozen_mask = np.zeros(len(w), dtype=bool)
    frozen_mask[list(frozen)] = True

    weighted = n_anchors > 0 and not mixed and power_fn is not None
    n_pool = len(pool)
    history = []
    for epoch in range(cfg.epochs):
        decay = epoch / (cfg.epochs - 1) if cfg.epochs > 1 else 0.0
        lr = cfg.learning_rate * (1.0 - 0.9 * decay)
        p = power_fn(epoch, cfg.epochs) if weighted else 0.0
        order = rng_data.permutation(n_pool)
        epoch_loss = 0.0
        for start in range(0, n_pool, cfg.batch_areas):
            chunk = order[start : start + cfg.batch_areas]
            if weighted and p > 0.0:
                a_idx = next(anchor_stream)
                loss, gw, gout = anchored_loss_grads(
                    w[chunk], w[n_data + a_idx], w_out, pool[chunk], anchor_freqs[a_idx], p
                )
            else:
                loss, gw, gout = batch_loss_grads(w[chunk], w_out, pool[chunk])
            live = ~frozen_mask[chunk]
            w[chunk[live]] -= lr * gw[live]
            w_out -= lr * gout
            epoch_loss += loss * len(chunk)
        epoch_loss /= n_pool
        if not np.isfinite(epoch_loss):
            raise DivergenceError(epoch, lr)
        history.append(epoch_loss)

    return EmbeddingModel(
        area_ids=all_ids,
        W=w,
        W_out=w_out,
        frozen_rows=frozen,
        loss_history=history,
    )


def train(data, cfg: TrainConfig | None = None) -> EmbeddingModel:
    """Train embeddings on an :class:`AreaTable` or an id -> counts mapping."""
    cfg = cfg or TrainConfig()
    ids, counts = _extract_counts(data)
    return _sgd(ids, normalize_counts(counts), cfg)


def approximation_loss(model: EmbeddingModel, table: AreaTable) -> float:
    """Mean ``1 - cos(predicted, empirical)`` class frequency over the table."""
    total = 0.0
    for gid, row in table.rows.items():
        f_hat = predict_frequency(model, model.row_of(gid))
        f = row.counts / row.counts.sum()
        total += 1.0 - cosine_similarity(f_hat, f)
    if not table.rows:
        raise DataError("empty area table")
    return total / len(table.rows)


def cosine_similarity(u: np.ndarray, v: np.ndarray) -> float:
    nu = float(np.linalg.norm(u))
    nv = float(np.linalg.norm(v))
    if nu == 0.0 or nv == 0.0:
        return 0.0
    if np.array_equal(u, v):
        return 1.0  # identical vectors are exactly similar, no rounding residue
    return float(np.dot(u, v) / (nu * nv))


def write_model(path, model: EmbeddingModel) -> None:
    """Textual model file; all values full-precision decimals."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"H={H} N={N_CLASSES} areas={len(model.area_ids)}\n")
        for i, area_id in enumerate(model.area_ids):
            fh.write(area_id + " " + " ".join(repr(float(v)) for v in model.W[i]) + "\n")
        for row in model.W_out:
            fh.write(" ".join(repr(float(v)) for v in row) + "\n")
        fh.write("frozen:" + "".join(f" {model.area_ids[i]}" for i in sorted(model.frozen_rows)) + "\n")


def read_model(path) -> EmbeddingModel:
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise ParseError("empty model file", path, 1)
    header = lines[0].split()
    try:
        fields = dict(part.split("=", 1) for part in header)
        n_areas = int(fields["areas"])
        if int(fields["H"]) != H or int(fields["N"]) != N_CLASSES:
            raise ParseError(f"unsupported model shape {lines[0]!r}", path, 1)
    except (KeyError, ValueError):
        raise ParseError(f"bad model header {lines[0]!r}", path, 1)
    expected = 1 + n_areas + H + 1
    if len(lines) < expected:
        raise ParseError(f"expected {expected} lines, found {len(lines)}", path, len(lines))
    area_ids = []
    w = np.empty((n_areas, H))
    for i in range(n_areas):
        parts = lines[1 + i].split()
        if len(parts) != 1 + H:
            raise ParseError(f"expected id + {H} values", path, 2 + i)
        area_ids.append(parts[0])
        w[i] = [float(v) for v in parts[1:]]
    w_out = np.empty((H, N_CLASSES))
    for j in range(H):
        parts = lines[1 + n_areas + j].split()
        if len(parts) != N_CLASSES:
            raise ParseError(f"expected {N_CLASSES} values", path, 2 + n_areas + j)
        w_out[j] = [float(v) for v in parts]
    frozen_line = lines[1 + n_areas + H]
    if not frozen_line.startswith("frozen:"):
        raise ParseError("missing frozen row list", path, expected)
    index = {a: i for i, a in enumerate(area_ids)}
    frozen = frozenset(index[a] for a in frozen_line[len("frozen:") :].split())
    return EmbeddingModel(area_ids=area_ids, W=w, W_out=w_out, frozen_rows=frozen)

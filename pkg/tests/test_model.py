"""Embedding model: gradients, training contracts, approximation loss."""

from dataclasses import replace

import numpy as np
import pytest

from areavec.errors import ConfigError, DataError
from areavec.mesh import AreaTable
from areavec.model import (
    H,
    EmbeddingModel,
    TrainConfig,
    anchored_loss_grads,
    approximation_loss,
    batch_loss_grads,
    cosine_similarity,
    loss_and_gradients,
    normalize_counts,
    predict_frequency,
    read_model,
    softmax_rows,
    train,
    write_model,
)
from areavec.stays import N_CLASSES

RNG = np.random.default_rng


def _random_freqs(rng, n):
    f = rng.random((n, N_CLASSES))
    return f / f.sum(axis=1, keepdims=True)


def _model(rng, n_areas=5):
    return EmbeddingModel(
        area_ids=[f"area{i}" for i in range(n_areas)],
        W=rng.normal(0, 0.5, (n_areas, H)),
        W_out=rng.normal(0, 0.5, (H, N_CLASSES)),
    )


def _counts_table(counts: dict[str, np.ndarray]):
    """Mapping is accepted directly by train(); helper for readability."""
    return counts


def test_softmax_of_zeros_is_uniform():
    model = EmbeddingModel(["a"], W=np.zeros((1, H)), W_out=np.zeros((H, N_CLASSES)))
    f = predict_frequency(model, 0)
    assert np.allclose(f, 1.0 / N_CLASSES, atol=1e-15)


def test_softmax_sums_to_one_and_shift_invariant():
    rng = RNG(0)
    z = rng.normal(0, 5, (20, N_CLASSES))
    p = softmax_rows(z)
    assert np.all(np.abs(p.sum(axis=1) - 1.0) < 1e-12)
    assert np.all(p > 0)
    shifted = softmax_rows(z + 3.7)
    assert np.max(np.abs(p - shifted)) < 1e-12


def test_gradients_match_central_differences():
    rng = RNG(42)
    w_rows = rng.normal(0, 0.8, (4, H))
    w_out = rng.normal(0, 0.8, (H, N_CLASSES))
    freqs = _random_freqs(rng, 4)
    loss, g_rows, g_out = batch_loss_grads(w_rows, w_out, freqs)
    h = 1e-6

    for _ in range(40):
        i, j = rng.integers(4), rng.integers(H)
        up, down = w_rows.copy(), w_rows.copy()
        up[i, j] += h
        down[i, j] -= h
        fd = (batch_loss_grads(up, w_out, freqs)[0] - batch_loss_grads(down, w_out, freqs)[0]) / (2 * h)
        assert abs(fd - g_rows[i, j]) <= 1e-5 * max(abs(fd), abs(g_rows[i, j]), 1e-3)

    for _ in range(40):
        i, j = rng.integers(H), rng.integers(N_CLASSES)
        up, down = w_out.copy(), w_out.copy()
        up[i, j] += h
        down[i, j] -= h
        fd = (batch_loss_grads(w_rows, up, freqs)[0] - batch_loss_grads(w_rows, down, freqs)[0]) / (2 * h)
        assert abs(fd - g_out[i, j]) <= 1e-5 * max(abs(fd), abs(g_out[i, j]), 1e-3)


def test_anchored_grads_reduce_at_p_zero_and_one():
    rng = RNG(3)
    wd = rng.normal(0, 0.5, (3, H))
    wa = rng.normal(0, 0.5, (2, H))
    w_out = rng.normal(0, 0.5, (H, N_CLASSES))
    fd_, fa = _random_freqs(rng, 3), _random_freqs(rng, 2)

    loss0, gw0, gout0 = anchored_loss_grads(wd, wa, w_out, fd_, fa, p=0.0)
    plain = batch_loss_grads(wd, w_out, fd_)
    assert loss0 == plain[0]
    assert np.array_equal(gw0, plain[1])
    assert np.array_equal(gout0, plain[2])

    loss1, gw1, gout1 = anchored_loss_grads(wd, wa, w_out, fd_, fa, p=1.0)
    anchor_only = batch_loss_grads(wa, w_out, fa)
    assert loss1 == anchor_only[0]
    assert np.array_equal(gw1, np.zeros_like(gw1))
    assert np.array_equal(gout1, anchor_only[2])


def test_zero_gradient_at_one_area_optimum():
    # With e = unit vector and the matching output row at log f, the
    # prediction equals the target exactly, so every gradient vanishes.
    rng = RNG(8)
    f = _random_freqs(rng, 1)
    w_rows = np.zeros((1, H))
    w_rows[0, 0] = 1.0
    w_out = np.zeros((H, N_CLASSES))
    w_out[0] = np.log(f[0])
    loss, g_rows, g_out = batch_loss_grads(w_rows, w_out, f)
    assert np.max(np.abs(g_rows)) < 1e-12
    assert np.max(np.abs(g_out)) < 1e-12


def test_per_record_loss_equals_count_weighted_loss():
    rng = RNG(17)
    for _ in range(25):
        counts = rng.integers(0, 30, N_CLASSES)
        counts[rng.integers(N_CLASSES)] += 1  # non-empty
        w_rows = rng.normal(0, 0.8, (1, H))
        w_out = rng.normal(0, 0.8, (H, N_CLASSES))
        freq = counts / counts.sum()
        aggregated, _, _ = batch_loss_grads(w_rows, w_out, freq[None, :])

        # Oracle: expand to one-hot records and average their losses.
        total = 0.0
        for k in np.flatnonzero(counts):
            onehot = np.zeros(N_CLASSES)
            onehot[k] = 1.0
            total += counts[k] * batch_loss_grads(w_rows, w_out, onehot[None, :])[0]
        per_record = total / counts.sum()
        assert abs(per_record - aggregated) < 1e-10


def test_loss_and_gradients_reports_frozen_rows_too():
    rng = RNG(5)
    model = _model(rng)
    model.frozen_rows = frozenset({1})
    batch = [(0, _random_freqs(rng, 1)[0]), (1, _random_freqs(rng, 1)[0])]
    loss, g_rows, g_out = loss_and_gradients(model, batch)
    assert np.isfinite(loss)
    assert g_rows.shape == (2, H)
    assert np.any(g_rows[1] != 0)  # reported even though frozen
    with pytest.raises(DataError):
        loss_and_gradients(model, [])


def test_single_area_converges_to_its_frequency():
    rng = RNG(30)
    counts = rng.integers(0, 50, N_CLASSES).astype(float)
    counts[counts < 35] = 0.0  # sparse support, as real tables have
    counts[0] += 1
    cfg = TrainConfig(epochs=4000, learning_rate=4.0, rng_seed=2)
    model = train(_counts_table({"only": counts}), cfg)
    f_hat = predict_frequency(model, 0)
    f = counts / counts.sum()
    assert 1.0 - cosine_similarity(f_hat, f) < 1e-3


def test_identical_areas_predict_identically():
    rng = RNG(31)
    counts = rng.integers(0, 40, N_CLASSES).astype(float)
    counts[counts < 25] = 0.0
    counts[3] += 1
    cfg = TrainConfig(epochs=6000, learning_rate=4.0, rng_seed=4)
    model = train(_counts_table({"a": counts, "b": counts.copy()}), cfg)
    fa = predict_frequency(model, model.row_of("a"))
    fb = predict_frequency(model, model.row_of("b"))
    assert 1.0 - cosine_similarity(fa, fb) < 1e-6


def test_training_is_deterministic():
    rng = RNG(9)
    data = {f"m{i}": rng.integers(1, 20, N_CLASSES).astype(float) for i in range(12)}
    cfg = TrainConfig(epochs=50, rng_seed=77)
    m1 = train(data, cfg)
    m2 = train(data, cfg)
    assert np.array_equal(m1.W, m2.W)
    assert np.array_equal(m1.W_out, m2.W_out)


def test_loss_decreases_from_first_to_last_epoch():
    rng = RNG(10)
    data = {f"m{i}": rng.integers(1, 20, N_CLASSES).astype(float) for i in range(30)}
    model = train(data, TrainConfig(epochs=200, rng_seed=1))
    assert model.loss_history[-1] <= model.loss_history[0]
    assert np.all(np.isfinite(model.W))


def test_zero_count_area_rejected():
    with pytest.raises(DataError):
        train({"good": np.ones(N_CLASSES), "bad": np.zeros(N_CLASSES)}, TrainConfig(epochs=1))


def test_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(epochs=0)
    with pytest.raises(ConfigError):
        TrainConfig(learning_rate=0.0)
    with pytest.raises(ConfigError):
        TrainConfig(batch_areas=0)


def test_approximation_loss_reference_cases():
    # Identical prediction/target -> 0; disjoint supports -> 1; mean of both -> 0.5.
    f1 = np.zeros(N_CLASSES)
    f1[:5] = 0.2
    f2 = np.zeros(N_CLASSES)
    f2[10:15] = 0.2

    def fake_table(rows):
        from areavec.mesh import AreaRow, Geocode, MeshLevel, FINE_SHAPE

        table_rows = {}
        for gid, counts in rows.items():
            table_rows[gid] = AreaRow(
                geocode=Geocode(5339461132, MeshLevel.M250),
                counts=counts,
                fine_counts=np.zeros(FINE_SHAPE, dtype=np.int64),
                unique_users=11,
            )
        return AreaTable(table_rows)

    logits_match = np.zeros((2, H))
    model = EmbeddingModel(["x", "y"], W=logits_match, W_out=np.zeros((H, N_CLASSES)))
    uniform = np.ones(N_CLASSES)
    assert approximation_loss(model, fake_table({"x": uniform, "y": uniform})) == pytest.approx(0.0, abs=1e-12)

    strong = np.zeros((1, H))
    strong[0, 0] = 1.0
    w_out = np.zeros((H, N_CLASSES))
    w_out[0, :5] = 60.0  # prediction mass entirely on classes 0..4
    model = EmbeddingModel(["x"], W=strong, W_out=w_out)
    table = fake_table({"x": (f2 * 50).astype(np.int64)})
    assert approximation_loss(model, table) == pytest.approx(1.0, abs=1e-9)

    model2 = EmbeddingModel(["x", "y"], W=np.vstack([strong, strong]), W_out=w_out)
    table2 = fake_table({"x": (f2 * 50).astype(np.int64), "y": (f1 * 50).astype(np.int64)})
    assert approximation_loss(model2, table2) == pytest.approx(0.5, abs=1e-9)


def test_all_rows_frozen_leaves_w_unchanged():
    rng = RNG(12)
    counts = {f"m{i}": rng.integers(1, 9, N_CLASSES).astype(float) for i in range(4)}
    from areavec.model import _extract_counts, _sgd

    ids, raw = _extract_counts(counts)
    freqs = normalize_counts(raw)
    frozen_w = rng.normal(0, 1, (len(ids), H))
    model = _sgd(
        [],
        np.zeros((0, N_CLASSES)),
        TrainConfig(epochs=20, rng_seed=3),
        anchor_ids=ids,
        anchor_w=frozen_w,
        anchor_freqs=freqs,
        mixed=True,
    )
    assert np.array_equal(model.W, frozen_w)
    assert model.frozen_rows == frozenset(range(len(ids)))


def test_model_file_round_trip(tmp_path):
    rng = RNG(20)
    model = _model(rng, n_areas=7)
    model.frozen_rows = frozenset({2, 5})
    path = tmp_path / "model.txt"
    write_model(path, model)
    back = read_model(path)
    assert back.area_ids == model.area_ids
    assert np.array_equal(back.W, model.W)
    assert np.array_equal(back.W_out, model.W_out)
    assert back.frozen_rows == model.frozen_rows

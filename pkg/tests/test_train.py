import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ceemkit import layers as L
from ceemkit.data import LabeledDataset
from ceemkit.errors import ShapeError, StratificationError, TrainingDivergedError
from ceemkit.graph import build_preset
from ceemkit.train import (AdamState, TrainConfig, TrainLog, adam_step, cce_loss, fit, lr_at_epoch,
                           one_hot, stratified_split)
from oracles import central_difference


def test_cce_perfect_and_uniform():
    y = one_hot([0, 3, 5], 6)
    loss, _ = cce_loss(y.copy(), y)
    assert loss == 0.0
    loss, _ = cce_loss(np.full((3, 6), 1 / 6), y)
    assert loss == pytest.approx(-math.log(1 / 6), rel=1e-12)
    assert loss == pytest.approx(1.7918, abs=1e-4)


def test_cce_shape_mismatch():
    with pytest.raises(ShapeError):
        cce_loss(np.full((2, 6), 1 / 6), one_hot([0, 1, 2], 6))


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_softmax_cce_gradient(seed):
    r = np.random.default_rng(seed)
    logits = r.normal(scale=3, size=(4, 6))
    y = one_hot(r.integers(0, 6, 4), 6)
    _, analytic = cce_loss(L.softmax(logits), y)
    numeric = central_difference(lambda: cce_loss(L.softmax(logits), y)[0], logits)
    np.testing.assert_allclose(analytic, numeric, rtol=1e-6, atol=1e-10)


def test_adam_zero_grads_from_fresh_state():
    p = {"w": np.array([1.0, -2.0])}
    out = adam_step(p, {"w": np.zeros(2)}, AdamState(), lr=0.1)
    assert np.array_equal(out["w"], p["w"])


def test_adam_constant_gradient_step_tends_to_lr_sign():
    lr = 1e-3
    state = AdamState()
    p = {"w": np.zeros(3)}
    g = {"w": np.array([0.5, -2.0, 1e-3])}
    for _ in range(5000):
        new = adam_step(p, g, state, lr)
        step = new["w"] - p["w"]
        p = new
    # with bias correction m/c1 = g and v/c2 = g^2 exactly, so the step is lr*g/(|g|+eps)
    expected = -lr * g["w"] / (np.abs(g["w"]) + 1e-7)
    np.testing.assert_allclose(step, expected, rtol=1e-9)
    np.testing.assert_allclose(step, -lr * np.sign(g["w"]), rtol=1e-3)
    assert state.t == 5000


def test_adam_matches_textbook_recurrence():
    r = np.random.default_rng(4)
    p = r.normal(size=5)
    m = v = np.zeros(5)
    state = AdamState()
    params = {"p": p.copy()}
    for t in range(1, 8):
        g = r.normal(size=5)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        p = p - 0.01 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-7)
        params = adam_step(params, {"p": g}, state, 0.01)
    np.testing.assert_allclose(params["p"], p, rtol=1e-13)


def test_lr_schedule():
    cfg = TrainConfig(epochs=25)
    for e in range(1, 9):
        assert lr_at_epoch(e, cfg) == 0.75e-4
    assert lr_at_epoch(9, cfg) == pytest.approx(0.72e-4, rel=1e-12)
    assert lr_at_epoch(25, cfg) == pytest.approx(0.75e-4 * 0.96 ** 17, rel=1e-12)
    assert lr_at_epoch(1, TrainConfig(epochs=2)) == 0.75e-4
    with pytest.raises(ValueError):
        lr_at_epoch(0, cfg)
    with pytest.raises(ValueError):
        lr_at_epoch(26, cfg)


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(ratios=(0.7, 0.2, 0.2))
    with pytest.raises(ValueError):
        TrainConfig(epochs=0)


def test_split_single_class_exact():
    tr, te, va = stratified_split([0] * 100, seed=1)
    assert (len(tr), len(te), len(va)) == (70, 20, 10)


def test_split_small_classes():
    labels = [0] * 10 + [1] * 5
    tr, te, va = stratified_split(labels, seed=3)
    lab = np.array(labels)
    assert [int((lab[p] == 0).sum()) for p in (tr, te, va)] == [7, 2, 1]
    assert [int((lab[p] == 1).sum()) for p in (tr, te, va)] == [3, 1, 1]


def test_split_rejects_tiny_class():
    with pytest.raises(StratificationError, match="class 1"):
        stratified_split([0, 0, 0, 1, 1])


@given(st.lists(st.integers(0, 4), min_size=1, max_size=200), st.integers(0, 1000))
def test_split_is_a_stratified_partition(labels, seed):
    labels = np.array(labels)
    counts = np.bincount(labels)
    if counts[counts > 0].min() < 3:
        with pytest.raises(StratificationError):
            stratified_split(labels, seed=seed)
        return
    parts = stratified_split(labels, seed=seed)
    joined = np.concatenate(parts)
    assert sorted(joined.tolist()) == list(range(len(labels)))
    for k in np.unique(labels):
        n = (labels == k).sum()
        for part, r in zip(parts, (0.7, 0.2, 0.1)):
            got = (labels[part] == k).sum()
            assert got >= 1
            if n >= 10:
                assert abs(got - n * r) <= 1


def test_split_deterministic():
    labels = np.repeat(np.arange(3), 20)
    a = stratified_split(labels, seed=9)
    b = stratified_split(labels, seed=9)
    assert all(np.array_equal(x, y) for x, y in zip(a, b))


def _toy_dataset(n=24, size=16, seed=0):
    r = np.random.default_rng(seed)
    labels = np.arange(n) % 6
    imgs = r.uniform(0, 255, size=(n, size, size, 1))
    return LabeledDataset(imgs, labels, ["BP", "Covid", "LO", "Normal", "TB", "VP"])


def test_fit_steps_and_log():
    ds = _toy_dataset(n=35)
    g = build_preset("vgg_lite_ceem", "tiny", input_shape=(16, 16, 1), seed=1)
    cfg = TrainConfig(epochs=3, batch_size=16, seed=1)
    res = fit(g, ds, cfg, val=_toy_dataset(n=6, seed=1))
    assert res.steps == 3 * math.ceil(35 / 16)
    assert res.adam.t == res.steps
    assert [r["epoch"] for r in res.log.rows] == [1, 2, 3]
    assert [r["lr"] for r in res.log.rows] == [lr_at_epoch(e, cfg) for e in (1, 2, 3)]
    assert all(math.isfinite(r["train_loss"]) and math.isfinite(r["val_loss"]) for r in res.log.rows)
    assert TrainLog.from_csv(res.log.to_csv()).rows == res.log.rows
    assert res.log.to_csv().splitlines()[0] == "epoch,lr,train_loss,train_acc,val_loss,val_acc,secs"


def test_fit_deterministic():
    ds = _toy_dataset()
    runs = []
    for _ in range(2):
        g = build_preset("vgg_lite", "tiny", input_shape=(16, 16, 1), seed=7)
        res = fit(g, ds, TrainConfig(epochs=5, seed=7))
        runs.append((res.log.to_csv(), [a.tobytes() for _, _, a in g.parameters()]))
    assert runs[0] == runs[1]


def test_fit_rejects_wrong_shape():
    g = build_preset("vgg_lite", "tiny", input_shape=(32, 32, 1))
    with pytest.raises(ShapeError):
        fit(g, _toy_dataset(), TrainConfig(epochs=1))


def test_fit_reports_divergence():
    ds = _toy_dataset()
    ds.images[0, 0, 0, 0] = np.nan
    g = build_preset("vgg_lite", "tiny", input_shape=(16, 16, 1))
    with pytest.raises(TrainingDivergedError) as exc:
        fit(g, ds, TrainConfig(epochs=2))
    assert exc.value.epoch == 1


def test_patience_stops_early():
    ds = _toy_dataset()
    g = build_preset("vgg_lite", "tiny", input_shape=(16, 16, 1))
    res = fit(g, ds, TrainConfig(epochs=30, lr0=0.05, patience=1), val=_toy_dataset(seed=5))
    assert res.stopped_early and len(res.log.rows) < 30

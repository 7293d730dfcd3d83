import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vinecam.densenet import build_model, preset
from vinecam.errors import DataError, NumericError
from vinecam.training import (
    AdamState,
    EarlyStopState,
    PlateauState,
    TrainHistory,
    TrainSettings,
    adam_step,
    early_stop_update,
    evaluate,
    fit,
    plateau_step,
    train_step,
)


def adam_oracle(p, grads, lr, wd, b1=0.9, b2=0.999, eps=1e-8):
    """Scalar Adam written out step by step."""
    m = v = 0.0
    for t, g in enumerate(grads, start=1):
        g = g + wd * p
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        p = p - lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
    return p


# -- adam -------------------------------------------------------------------------

def test_adam_first_step():
    p = {"w": np.array([0.5])}
    adam_step(p, {"w": np.array([1.0])}, AdamState(), 0.001)
    assert p["w"][0] == pytest.approx(0.5 - 0.001 / (1 + 1e-8), abs=1e-15)


def test_adam_zero_gradient_no_decay():
    p = {"w": np.array([0.3, -0.7])}
    adam_step(p, {"w": np.zeros(2)}, AdamState(), 0.01)
    assert p["w"].tolist() == [0.3, -0.7]


def test_adam_decay_shrinks_positive_param():
    p = {"w": np.array([2.0])}
    adam_step(p, {"w": np.zeros(1)}, AdamState(), 0.001, weight_decay=1e-4)
    assert p["w"][0] < 2.0


def test_adam_matches_scalar_oracle():
    rng = np.random.default_rng(0)
    grads = rng.standard_normal(25)
    p = {"w": np.array([0.8])}
    st_ = AdamState()
    for g in grads:
        adam_step(p, {"w": np.array([g])}, st_, 0.01, 0.05)
    assert p["w"][0] == pytest.approx(adam_oracle(0.8, grads, 0.01, 0.05), rel=1e-12)
    assert st_.t == 25


def test_adam_shape_mismatch():
    with pytest.raises(ValueError):
        adam_step({"w": np.zeros(3)}, {"w": np.zeros(2)}, AdamState(), 0.1)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0.05, 10), min_size=1, max_size=8), st.integers(1, 30))
def test_decay_alone_never_grows_params_far_from_zero(mags, steps):
    # each Adam step has length at most lr; with steps * lr < |p| no entry can reach zero,
    # so the decay-only gradient always points toward zero and magnitudes cannot grow
    lr = 1e-3
    p = {"w": np.array(mags) * np.where(np.arange(len(mags)) % 2, -1, 1)}
    st_ = AdamState()
    for _ in range(steps):
        before = np.abs(p["w"]).copy()
        adam_step(p, {"w": np.zeros(len(mags))}, st_, lr, 1e-4)
        assert np.all(np.abs(p["w"]) <= before)


def test_decay_alone_can_overshoot_tiny_params():
    # a parameter smaller than lr/2 crosses zero on the first normalized step
    p = {"w": np.array([1e-4])}
    adam_step(p, {"w": np.zeros(1)}, AdamState(), 1e-3, 1e-4)
    assert p["w"][0] == pytest.approx(-4e-4, rel=1e-6)


def test_decay_alone_momentum_carries_past_zero():
    # starting at 0.01 the parameter crosses zero at step 12 and keeps growing in magnitude for a while
    p = {"w": np.array([0.01])}
    st_ = AdamState()
    trace = []
    for _ in range(14):
        adam_step(p, {"w": np.zeros(1)}, st_, 1e-3, 1e-4)
        trace.append(p["w"][0])
    assert trace[10] > 0 > trace[11]
    assert abs(trace[13]) > abs(trace[12]) > 1e-3


# -- schedules ------------------------------------------------------------------------

def test_plateau_trace_flat_losses():
    s = PlateauState(lr=0.001)
    lrs = [plateau_step(s, 1.0, 0.1, 2, 1e-6) for _ in range(4)]
    assert lrs == [0.001, 0.001, 0.001, pytest.approx(0.0001)]


def test_plateau_improving_keeps_lr():
    s = PlateauState(lr=0.001)
    assert {plateau_step(s, 1.0 - 0.1 * i) for i in range(8)} == {0.001}


def test_plateau_floor():
    s = PlateauState(lr=1e-6)
    for _ in range(20):
        assert plateau_step(s, 1.0, 0.1, 2, 1e-6) == 1e-6


def test_plateau_lr_non_increasing():
    s = PlateauState(lr=0.01)
    rng = np.random.default_rng(0)
    lrs = [plateau_step(s, float(v)) for v in rng.uniform(0.5, 1.5, 60)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:])) and lrs[-1] > 0


def test_early_stop_trace():
    s = EarlyStopState()
    flags = [early_stop_update(s, v, 5, 0.001) for v in (1.0, 0.99, 0.995, 0.996, 0.997, 0.998, 0.999)]
    assert flags == [False] * 6 + [True]
    assert s.best == 0.99


def test_early_stop_improving_never_stops():
    s = EarlyStopState()
    assert not any(early_stop_update(s, 1.0 - 0.01 * i, 5, 0.001) for i in range(20))


def test_early_stop_first_epoch():
    assert early_stop_update(EarlyStopState(), 123.0, 1, 0.0) is False


def test_settings_validation():
    with pytest.raises(ValueError):
        TrainSettings(learning_rate=0)
    with pytest.raises(ValueError):
        TrainSettings(early_stop_min_delta=-1)


# -- fit ------------------------------------------------------------------------------

def _toy_data(n, seed):
    """Four classes that differ by a per-channel offset."""
    rng = np.random.default_rng(seed)
    y = np.arange(n) % 4
    x = rng.standard_normal((n, 3, 64, 64)).astype(np.float32) * 0.5
    x[:, 0] += (y == 1)[:, None, None] * 1.5
    x[:, 1] += (y == 2)[:, None, None] * 1.5
    x[:, 2] += (y == 3)[:, None, None] * 1.5
    return x, y


@pytest.fixture(scope="module")
def toy():
    return _toy_data(40, 0), _toy_data(12, 1)


def test_fit_single_epoch(toy):
    train, val = toy
    res = fit(build_model(preset("desk"), 0), train, val, TrainSettings(max_epochs=1, batch_size=16))
    assert len(res.history) == 1 and res.best_epoch == 1
    row = res.history.rows[0]
    assert set(row) >= {"epoch", "train_loss", "train_acc", "val_loss", "val_acc", "lr"}


def test_fit_is_deterministic(toy):
    train, val = toy
    cfg = TrainSettings(max_epochs=2, batch_size=16, seed=4)
    a = fit(build_model(preset("desk"), 1), train, val, cfg)
    b = fit(build_model(preset("desk"), 1), train, val, cfg)
    strip = lambda h: [{k: v for k, v in r.items() if k != "seconds"} for r in h.rows]  # noqa: E731
    assert strip(a.history) == strip(b.history)
    for n in a.best_model.params:
        assert a.best_model.params[n].data.tobytes() == b.best_model.params[n].data.tobytes()


def test_fit_returns_best_not_last(toy):
    train, val = toy
    res = fit(build_model(preset("desk"), 2), train, val, TrainSettings(max_epochs=4, batch_size=8))
    losses = res.history.column("val_loss")
    assert res.best_epoch == int(np.argmin(losses)) + 1
    assert res.best_val_loss == min(losses)
    loss, _, _ = evaluate(res.best_model, *val)
    assert loss == pytest.approx(res.best_val_loss, rel=1e-12)


def test_fit_keeps_partial_batch(toy):
    (x, y), val = toy
    seen = []
    res = fit(build_model(preset("desk"), 0), (x[:37], y[:37]), val, TrainSettings(max_epochs=1, batch_size=16),
              on_epoch=lambda m, s: seen.append(s.adam.t))
    assert seen == [3] and len(res.history) == 1


def test_fit_errors(toy):
    (x, y), val = toy
    m = build_model(preset("desk"), 0)
    with pytest.raises(DataError):
        fit(m, (x[:0], y[:0]), val, TrainSettings())
    with pytest.raises(DataError):
        fit(m, (x[:4], y[:4]), val, TrainSettings(batch_size=32))


def test_train_step_nan_aborts(toy):
    (x, y), _ = toy
    m = build_model(preset("desk"), 0)
    m.params["head.fc.bias"].data[0] = np.nan
    with pytest.raises(NumericError):
        train_step(m, x[:4], y[:4], AdamState(), 1e-3, 0.0, np.random.default_rng(0))


def test_history_csv_roundtrip(tmp_path):
    h = TrainHistory()
    h.append(epoch=1, train_loss=0.5, train_acc=0.75, val_loss=0.25, val_acc=1.0, lr=0.001, seconds=2.5)
    h.write_csv(tmp_path / "h.csv")
    text = (tmp_path / "h.csv").read_text()
    assert text.splitlines()[0] == "epoch,train_loss,train_acc,val_loss,val_acc,lr"
    back = TrainHistory.read_csv(tmp_path / "h.csv")
    assert back.column("val_loss") == [0.25] and back.column("epoch") == [1]
    h.write_timing_csv(tmp_path / "t.csv")
    assert (tmp_path / "t.csv").read_text().splitlines()[0] == "epoch,seconds"

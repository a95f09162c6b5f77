import io

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vlstm.data import WindowedDataset
from vlstm.model import build_model, load_model, loss, loss_and_grads, predict, predict_batch, save_model
from vlstm.ndcore import grad_check
from vlstm.synthetic import ema_mixture_process, sequence_dataset
from vlstm.train import Adam, TrainConfig, clip_by_global_norm, early_stop, evaluate, optimizer_step, train_model


def tiny_dataset(n=300, seq_len=6, seed=0, const=None):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=n) if const is None else np.full(n, const)
    y = np.roll(x, 1) if const is None else np.full(n, const)
    return sequence_dataset(x, y, seq_len)


# -- model ----------------------------------------------------------------------

def test_predict_shapes_and_errors():
    m = build_model("vlstm", 2, 5, 2)
    w = np.random.default_rng(0).normal(size=(7, 5))
    assert predict_batch(m, w).shape == (7,)
    assert predict(m, w[0]) == pytest.approx(predict_batch(m, w)[0], abs=0)
    with pytest.raises(ValueError):
        predict_batch(m, np.zeros((3, 4)))
    with pytest.raises(ValueError):
        loss(m, w, np.zeros(3))


def test_archive_round_trip_is_bit_exact(tmp_path):
    m = build_model("msgru", 3, 4, 2, bias=False, seed=9)
    save_model(tmp_path / "m.npz", m, {"note": "x"})
    back = load_model(tmp_path / "m.npz")
    assert back.config() == m.config()
    for k, v in m.params().items():
        assert np.array_equal(back.params()[k], v)
    w = np.random.default_rng(1).normal(size=(3, 4))
    assert np.array_equal(predict_batch(back, w), predict_batch(m, w))


@pytest.mark.parametrize("kind, n, coupling", [("lstm", 1, "independent"), ("vlstm", 2, "tied"), ("msgru", 3, "independent")])
def test_model_gradients(kind, n, coupling):
    m = build_model(kind, 2, 4, n, coupling=coupling, seed=3)
    rng = np.random.default_rng(2)
    x, y = rng.normal(size=(5, 4)), rng.normal(size=5)

    def fn(params):
        mm = m.copy()
        mm.set_params(params)
        return loss_and_grads(mm, x, y)

    assert grad_check(fn, m.params()) < 1e-4


def test_set_params_rejects_shape_change():
    m = build_model("lstm", 2, 3)
    with pytest.raises(ValueError):
        m.set_params({"head/W1": np.zeros((3, 3))})


# -- optimiser --------------------------------------------------------------------

def test_adam_first_step_is_signed_lr():
    p = {"w": np.array([1.0, -2.0, 0.5])}
    g = {"w": np.array([0.3, -4.0, 1e-3])}
    Adam(0.01).step(p, g)
    assert p["w"] == pytest.approx(np.array([1.0, -2.0, 0.5]) - 0.01 * np.sign(g["w"]), abs=1e-7)


def test_adam_zero_gradient_keeps_params_and_decays_moments():
    q = {"w": np.array([1.0])}
    fresh = optimizer_step(q, {"w": np.zeros(1)}, None, 0.1)
    assert q["w"][0] == 1.0 and fresh.m["w"][0] == 0.0

    p = {"w": np.array([1.0])}
    state = optimizer_step(p, {"w": np.array([2.0])}, None, 0.1)
    m1, v1 = state.m["w"].copy(), state.v["w"].copy()
    optimizer_step(p, {"w": np.zeros(1)}, state, 0.1)
    assert state.m["w"] == pytest.approx(0.9 * m1)
    assert state.v["w"] == pytest.approx(0.999 * v1)


def test_adam_matches_closed_form_two_steps():
    lr, b1, b2, eps = 0.1, 0.9, 0.999, 1e-8
    g1, g2 = 0.5, -0.2
    m1, v1 = (1 - b1) * g1, (1 - b2) * g1 ** 2
    x1 = 1.0 - lr * (m1 / (1 - b1)) / (np.sqrt(v1 / (1 - b2)) + eps)
    m2, v2 = b1 * m1 + (1 - b1) * g2, b2 * v1 + (1 - b2) * g2 ** 2
    x2 = x1 - lr * (m2 / (1 - b1 ** 2)) / (np.sqrt(v2 / (1 - b2 ** 2)) + eps)
    p = {"x": np.array([1.0])}
    opt = Adam(lr)
    opt.step(p, {"x": np.array([g1])})
    opt.step(p, {"x": np.array([g2])})
    assert p["x"][0] == pytest.approx(x2, rel=1e-14)


def test_adam_shape_mismatch():
    with pytest.raises(ValueError):
        Adam().step({"w": np.zeros(2)}, {"w": np.zeros(3)})


def test_clip_by_global_norm():
    g = {"a": np.array([3.0]), "b": np.array([4.0])}
    assert clip_by_global_norm(g, 1.0)
    assert np.sqrt(g["a"] ** 2 + g["b"] ** 2)[0] == pytest.approx(1.0)
    assert not clip_by_global_norm({"a": np.array([0.5])}, 1.0)


# -- early stopping ----------------------------------------------------------------

def test_early_stop_examples():
    assert not early_stop([5, 4, 3, 2, 1], 5)
    assert early_stop([1, 2, 3, 4, 5, 6], 5)
    curve = [3, 2, 2, 2, 2, 2, 2]
    assert not early_stop(curve[:6], 5)
    assert early_stop(curve, 5)


def test_early_stop_needs_patience_plus_one():
    assert not early_stop([1.0] * 5, 5)
    assert early_stop([1.0] * 6, 5)
    with pytest.raises(ValueError):
        early_stop([1.0], 0)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(0, 10), min_size=1, max_size=30), st.integers(1, 6))
def test_early_stop_fires_only_without_improvement(curve, patience):
    fired = early_stop(curve, patience)
    if len(curve) > patience:
        improved = min(curve[-patience:]) < min(curve[:-patience])
        assert fired == (not improved)
    else:
        assert not fired


# -- training ----------------------------------------------------------------------

def test_zero_learning_rate_stops_at_patience_plus_one():
    ds = tiny_dataset()
    res = train_model(build_model("lstm", 2, 6), ds, TrainConfig(learning_rate=0.0, patience=5))
    assert res.epochs_run == 6 and res.converged
    assert len(set(res.val_curve)) == 1


def test_result_invariants_and_restoration():
    ds = tiny_dataset()
    buf = io.StringIO()
    res = train_model(build_model("vlstm", 2, 6, 2, seed=1), ds,
                      TrainConfig(learning_rate=1e-2, max_epochs=15, seed=4), epoch_log=buf)
    assert res.best_val_loss == min(res.val_curve)
    assert len(res.train_curve) == len(res.val_curve) == res.epochs_run <= 15
    assert res.val_curve[res.best_epoch - 1] == res.best_val_loss
    assert evaluate(res.final_model, ds, "validation") == pytest.approx(res.best_val_loss, abs=1e-12)
    lines = buf.getvalue().splitlines()
    assert lines[0] == "epoch,train_loss,val_loss,wall_time_s" and len(lines) == res.epochs_run + 1
    if not res.converged:
        assert res.epochs_run == 15


def test_training_is_deterministic():
    ds = tiny_dataset()
    cfg = TrainConfig(learning_rate=5e-3, max_epochs=8, seed=2)
    a = train_model(build_model("msgru", 2, 6, 2, seed=0), ds, cfg)
    b = train_model(build_model("msgru", 2, 6, 2, seed=0), ds, cfg)
    assert a.val_curve == b.val_curve and a.train_curve == b.train_curve
    for k, v in a.final_model.params().items():
        assert np.array_equal(v, b.final_model.params()[k])


def test_train_does_not_touch_caller_model():
    m = build_model("lstm", 2, 6)
    before = {k: v.copy() for k, v in m.params().items()}
    train_model(m, tiny_dataset(), TrainConfig(learning_rate=1e-2, max_epochs=2))
    for k, v in m.params().items():
        assert np.array_equal(v, before[k])


def test_constant_target_is_learned():
    ds = tiny_dataset(n=200, const=0.5)
    res = train_model(build_model("lstm", 2, 6, seed=0), ds, TrainConfig(learning_rate=2e-2, max_epochs=300))
    assert res.best_val_loss <= 1e-4
    assert res.train_curve[10] < res.train_curve[0]


def test_ema_process_reaches_noise_floor():
    # y[t+1] = 0.9 * EMA_10(y)[t] + eps, eps ~ N(0, 0.1^2): irreducible MSE 0.01
    y = ema_mixture_process(3000, taus=(10.0,), weights=(1.0,), gain=0.9, noise_var=0.01, seed=0)
    ds = sequence_dataset(y, y, 20)
    res = train_model(build_model("lstm", 2, 20, seed=0), ds, TrainConfig(learning_rate=1e-2, max_epochs=200))
    assert res.best_val_loss <= 1.2 * 0.01


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_is_flagged():
    ds = tiny_dataset()
    ds.targets[ds.mask("train")] = np.inf
    res = train_model(build_model("lstm", 1, 6), ds, TrainConfig(max_epochs=3))
    assert res.diverged and not res.converged


def test_empty_split_rejected():
    ds = tiny_dataset()
    ds2 = WindowedDataset(ds.windows, ds.targets, np.where(ds.split == "validation", "test", ds.split),
                          ds.symbols, ds.dates, ds.seq_len)
    with pytest.raises(ValueError):
        train_model(build_model("lstm", 1, 6), ds2)
    with pytest.raises(ValueError):
        evaluate(build_model("lstm", 1, 6), ds2, "validation")


def test_evaluate_equals_direct_loss():
    ds = tiny_dataset()
    m = build_model("vlstm", 2, 6, 2)
    x, y = ds.arrays("test")
    d = predict_batch(m, x) - y
    assert evaluate(m, ds, "test") == pytest.approx(float(np.mean(d ** 2)), rel=1e-14)


def test_all_zero_parameters_predict_zero():
    m = build_model("vlstm", 3, 5, 2)
    m.set_params({k: np.zeros_like(v) for k, v in m.params().items()})
    assert np.array_equal(predict_batch(m, np.random.default_rng(0).normal(size=(4, 5))), np.zeros(4))


@pytest.mark.parametrize("kind, n", [("lstm", 1), ("vlstm", 2), ("msgru", 2)])
def test_prediction_depends_on_last_input(kind, n):
    m = build_model(kind, 2, 6, n, seed=1)
    w = np.random.default_rng(2).normal(size=6)
    w2 = w.copy()
    w2[-1] += 0.5
    assert abs(predict(m, w) - predict(m, w2)) > 0

import numpy as np
import pytest

from weathertokens import tensor as T
from weathertokens.data import ForecastSample, NormalizationStats
from weathertokens.encoder import EncoderConfig
from weathertokens.errors import ConfigError, CorruptionError, FingerprintError, FormatError, NumericalError
from weathertokens.trainer import (
    Adam,
    EarlyStopping,
    ModelState,
    TrainConfig,
    adam_step,
    checkpoint_bytes,
    load_checkpoint,
    parameter_payload_bytes,
    save_checkpoint,
    train,
)
from weathertokens.transformer import ForecastModel, TransformerConfig


def tiny_samples(n, hours=4, hw=(4, 4), seed=0):
    """Samples whose target is a smooth function of the mean u-wind."""
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        w = rng.standard_normal((hours, 2, *hw)).astype(np.float32)
        target = 1 / (1 + np.exp(-2 * w[:, 0].mean(axis=(1, 2))))
        out.append(ForecastSample(1000 + 24 * i, w, target, target * 100, np.full(hours, 100.0)))
    return out


def tiny_model(seed=0):
    return ForecastModel(EncoderConfig(), TransformerConfig(horizon=4), seed=seed)


STATS = NormalizationStats(("u10", "v10"), np.zeros(2), np.ones(2), 0, 10)


# config

@pytest.mark.parametrize("kwargs", [{"learning_rate": 0}, {"batch_size": 0}, {"patience": 0},
                                    {"max_epochs": 0}, {"precision": "16"}])
def test_config_validation(kwargs):
    with pytest.raises(ConfigError):
        TrainConfig(**kwargs)


def test_config_defaults():
    cfg = TrainConfig()
    assert (cfg.learning_rate, cfg.batch_size, cfg.max_epochs, cfg.patience) == (1e-4, 8, 500, 20)


# Adam

def test_adam_zero_gradient_is_noop():
    p = {"w": np.array([1.5, -2.0])}
    moments = ({"w": np.zeros(2)}, {"w": np.zeros(2)})
    step = 0
    for _ in range(10):
        step = adam_step(p, {"w": np.zeros(2)}, moments, step)
    np.testing.assert_array_equal(p["w"], [1.5, -2.0])
    assert step == 10


def test_adam_first_step():
    p = {"x": np.array([1.0])}
    adam_step(p, {"x": np.array([1.0])}, ({"x": np.zeros(1)}, {"x": np.zeros(1)}), 0)
    assert p["x"][0] == pytest.approx(1.0 - 1e-4, abs=1e-12)


def test_adam_matches_reference_recurrence():
    rng = np.random.default_rng(0)
    grads = rng.standard_normal((5, 3))
    p = {"w": np.zeros(3)}
    moments = ({"w": np.zeros(3)}, {"w": np.zeros(3)})
    step = 0
    ref, m, v = np.zeros(3), np.zeros(3), np.zeros(3)
    for t, g in enumerate(grads, start=1):
        step = adam_step(p, {"w": g.copy()}, moments, step, lr=0.01)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref = ref - 0.01 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
    np.testing.assert_allclose(p["w"], ref, rtol=1e-12)


def test_adam_convergence_on_quadratic():
    with T.precision("64"):
        x = T.Tensor([0.0], requires_grad=True)
        opt = Adam({"x": x}, lr=1e-2)
        for _ in range(5000):
            opt.zero_grad()
            d = T.sub(x, T.Tensor([3.0]))
            T.backward(T.sum(T.mul(d, d)))
            opt.step()
    assert abs(x.data[0] - 3.0) < 0.05


def test_adam_non_finite_gradient_names_parameter():
    p = {"encoder.fc.weight": np.ones(2)}
    with pytest.raises(NumericalError, match="encoder.fc.weight"):
        adam_step(p, {"encoder.fc.weight": np.array([1.0, np.nan])}, ({"encoder.fc.weight": np.zeros(2)},
                                                                       {"encoder.fc.weight": np.zeros(2)}), 0)
    np.testing.assert_array_equal(p["encoder.fc.weight"], 1.0)


# early stopping

def test_early_stopping_plateau_trace():
    stop = EarlyStopping(20)
    trace = [5.0, 4.0, 3.0] + [3.0] * 40
    for epoch, loss in enumerate(trace, start=1):
        stop.update(epoch, loss)
        assert stop.since_improvement <= 20
        if stop.should_stop:
            break
    assert epoch == 23 and stop.best_epoch == 3


def _replay(trace, max_epochs=500, patience=20):
    model = tiny_model()
    snapshots = {}

    def validation(m, epoch):
        snapshots[epoch] = m.parameters()["head.bias"].data.copy()
        return trace[epoch - 1]

    cfg = TrainConfig(max_epochs=max_epochs, patience=patience, learning_rate=1e-2)
    result = train(model, tiny_samples(3), tiny_samples(1), cfg, validation_fn=validation)
    return model, result, snapshots


def test_train_stops_and_restores_best():
    model, result, snaps = _replay([5.0, 4.0, 3.0] + [3.0] * 40)
    assert result.stopped_epoch == 23 and result.best_epoch == 3
    assert len(result.history) == 23
    np.testing.assert_array_equal(model.parameters()["head.bias"].data, snaps[3])
    np.testing.assert_array_equal(result.state.params["head.bias"], snaps[3])
    assert result.state.config["best_epoch"] == 3


def test_train_decreasing_runs_to_max_epochs():
    _, result, _ = _replay([10.0 - 0.1 * i for i in range(30)], max_epochs=30)
    assert result.stopped_epoch == 30 and result.best_epoch == 30


def test_best_snapshot_never_worse_than_earlier():
    rng = np.random.default_rng(3)
    trace = list(rng.uniform(1, 2, size=60))
    _, result, _ = _replay(trace, max_epochs=60, patience=5)
    best = result.history[result.best_epoch - 1].val_mse
    assert all(best <= r.val_mse for r in result.history)


def test_train_rejects_empty_splits():
    with pytest.raises(ConfigError):
        train(tiny_model(), [], tiny_samples(1))
    with pytest.raises(ConfigError):
        train(tiny_model(), tiny_samples(2), [])


def test_train_non_finite_loss():
    bad = tiny_samples(2)
    bad[0].weather[0, 0, 0, 0] = np.nan
    with pytest.raises(NumericalError, match="epoch 1"):
        train(tiny_model(), bad, tiny_samples(1), TrainConfig(max_epochs=2))


def test_training_is_deterministic():
    cfg = TrainConfig(max_epochs=3, batch_size=2, learning_rate=1e-3, seed=5)
    a = train(tiny_model(1), tiny_samples(5), tiny_samples(2, seed=1), cfg, stats=STATS)
    b = train(tiny_model(1), tiny_samples(5), tiny_samples(2, seed=1), cfg, stats=STATS)
    assert a.loss_log_csv() == b.loss_log_csv()
    assert checkpoint_bytes(a.state) == checkpoint_bytes(b.state)
    assert a.loss_log_csv().splitlines()[0] == "epoch,train_mse,val_mse"


def test_training_loss_halves_on_small_set():
    cfg = TrainConfig(max_epochs=200, patience=200, seed=0)
    result = train(tiny_model(), tiny_samples(10), tiny_samples(2, seed=9), cfg)
    first = result.history[0].train_mse
    assert min(r.train_mse for r in result.history) <= 0.5 * first


# checkpoints

def _state(optimizer=True):
    model = tiny_model(2)
    opt = Adam(model.parameters())
    if optimizer:
        for k, p in model.parameters().items():
            p.grad = np.full_like(p.data, 0.01)
        opt.step()
    return ModelState.capture(model, opt if optimizer else None, STATS, {"note": "x"}), model


def test_checkpoint_round_trip(tmp_path):
    state, _ = _state()
    path = tmp_path / "m.wmtk"
    save_checkpoint(state, path)
    back = load_checkpoint(path)
    assert back.step == 1 and back.config == state.config
    for table in ("params", "buffers", "m", "v"):
        a, b = getattr(state, table), getattr(back, table)
        assert a.keys() == b.keys()
        assert all(a[k].tobytes() == b[k].tobytes() for k in a)
    save_checkpoint(back, tmp_path / "again.wmtk")
    assert (tmp_path / "again.wmtk").read_bytes() == path.read_bytes()
    assert path.read_bytes()[:4] == b"WMTK"


def test_checkpoint_rebuilds_model(tmp_path):
    state, model = _state()
    save_checkpoint(state, tmp_path / "m.wmtk")
    rebuilt = load_checkpoint(tmp_path / "m.wmtk").build_model()
    x = np.random.default_rng(0).standard_normal((4, 2, 6, 6)).astype(np.float32)
    np.testing.assert_array_equal(rebuilt.predict(x), model.predict(x))
    assert load_checkpoint(tmp_path / "m.wmtk").stats.to_text() == STATS.to_text()


def test_checkpoint_fingerprint_edit(tmp_path):
    state, _ = _state()
    path = tmp_path / "m.wmtk"
    save_checkpoint(state, path)
    raw = bytearray(path.read_bytes())
    raw[6] ^= 0xFF
    path.write_bytes(bytes(raw))
    with pytest.raises(FingerprintError):
        load_checkpoint(path)


def test_checkpoint_expected_fingerprint(tmp_path):
    state, _ = _state()
    save_checkpoint(state, tmp_path / "m.wmtk")
    other = ModelState.capture(ForecastModel(EncoderConfig(in_channels=3), TransformerConfig()), stats=STATS)
    with pytest.raises(FingerprintError):
        load_checkpoint(tmp_path / "m.wmtk", expected_fingerprint=other.fingerprint)
    assert load_checkpoint(tmp_path / "m.wmtk", expected_fingerprint=state.fingerprint).step == 1


def test_checkpoint_version_and_truncation(tmp_path):
    state, _ = _state()
    path = tmp_path / "m.wmtk"
    save_checkpoint(state, path)
    raw = path.read_bytes()
    path.write_bytes(raw[:4] + b"\x09\x00" + raw[6:])
    with pytest.raises(FormatError):
        load_checkpoint(path)
    path.write_bytes(b"NOPE" + raw[4:])
    with pytest.raises(FormatError):
        load_checkpoint(path)
    path.write_bytes(raw[:-10])
    with pytest.raises(CorruptionError):
        load_checkpoint(path)
    path.write_bytes(raw + b"\0")
    with pytest.raises(CorruptionError):
        load_checkpoint(path)


def test_payload_size():
    model = ForecastModel(EncoderConfig(), TransformerConfig())
    state = ModelState.capture(model, Adam(model.parameters()), STATS)
    assert parameter_payload_bytes(state) == 274_353 * 4 == 1_097_412
    assert abs(parameter_payload_bytes(state) / 1e6 - 1.1) / 1.1 < 0.01
    without = len(checkpoint_bytes(state, include_optimizer=False))
    assert 1_097_412 < without < 1_097_412 + 20_000
    assert len(checkpoint_bytes(ModelState.capture(model, None, STATS))) == without

import math

import numpy as np
import pytest

from btnet.autodiff import Tape, backward
from btnet.geometry import unit
from btnet.models import Batch, ConfigError, ModelConfig, build_model, load_checkpoint
from btnet.training import TrainConfig, TrainingError, augment_batch, evaluate, train

from helpers import events, small_model

TINY = dict(rep_width=8, latent_dim=8, hidden_width=16)


@pytest.fixture(scope="module")
def data():
    return events(96, seed=1, stream=0), events(48, seed=1, stream=1)


def test_evaluate_matches_direct_logits(data):
    model = small_model("vector", seed=3)
    scores, loss = evaluate(model, data[1], batch_size=7)
    logits = model.logits(Batch.from_dataset(data[1]))
    np.testing.assert_allclose(scores, logits[:, 1] - logits[:, 0], atol=1e-12)
    lse = np.logaddexp(logits[:, 0], logits[:, 1])
    ce = np.mean(lse - logits[np.arange(len(logits)), data[1].label])
    assert loss == pytest.approx(ce, rel=1e-12)


def test_untrained_loss_is_ln2(data):
    _, loss = evaluate(build_model(ModelConfig(**TINY)), data[1])
    assert loss == pytest.approx(math.log(2.0), abs=1e-12)


def test_training_reduces_loss(data):
    model = build_model(ModelConfig(model_class="vector", **TINY))
    res = train(model, *data, TrainConfig(epochs=4, batch_size=16, lr=3e-3))
    assert res.history[-1].train_loss < res.history[0].train_loss
    assert res.best_val_loss == min(r.val_loss for r in res.history)
    _, loss = evaluate(model, data[1])
    assert loss == pytest.approx(res.best_val_loss, rel=1e-12)     # parameters restored to the best epoch


def test_training_is_deterministic(data, tmp_path):
    logs = []
    for k in range(2):
        model = build_model(ModelConfig(model_class="vector", seed=5, **TINY))
        train(model, *data, TrainConfig(epochs=2, batch_size=16, seed=5), tmp_path / str(k))
        logs.append((tmp_path / str(k) / "metrics.log").read_text())
    assert logs[0] == logs[1]


def test_resume_continues_identically(data, tmp_path):
    cfg = TrainConfig(epochs=3, batch_size=32, seed=2)
    full = build_model(ModelConfig(model_class="vector", seed=2, **TINY))
    train(full, *data, cfg, tmp_path / "full")
    part = build_model(ModelConfig(model_class="vector", seed=2, **TINY))
    train(part, *data, TrainConfig(epochs=2, batch_size=32, seed=2), tmp_path / "part")
    again = build_model(ModelConfig(model_class="vector", seed=2, **TINY))
    res = train(again, *data, cfg, tmp_path / "part", resume=tmp_path / "part" / "last.ckpt")
    assert [r.epoch for r in res.history] == [1, 2, 3]
    assert (tmp_path / "part" / "metrics.log").read_text() == (tmp_path / "full" / "metrics.log").read_text()
    assert np.array_equal(again.store.values, full.store.values)


def test_resume_rejects_other_config(data, tmp_path):
    model = build_model(ModelConfig(model_class="vector", **TINY))
    train(model, *data, TrainConfig(epochs=1, batch_size=48), tmp_path)
    other = build_model(ModelConfig(model_class="tensor", **TINY))
    with pytest.raises(TrainingError, match="different model config"):
        train(other, *data, TrainConfig(epochs=2), tmp_path, resume=tmp_path / "last.ckpt")


def test_checkpoints_and_log_written(data, tmp_path):
    model = build_model(ModelConfig(model_class="vector", **TINY))
    res = train(model, *data, TrainConfig(epochs=2, batch_size=48), tmp_path)
    lines = (tmp_path / "metrics.log").read_text().splitlines()
    assert lines[0].startswith("#") and len(lines) == 3
    best, meta, adam = load_checkpoint(tmp_path / "best.ckpt")
    assert meta["epoch"] == res.best_epoch and adam is None
    assert load_checkpoint(tmp_path / "last.ckpt")[2] is not None


def test_early_stopping(data):
    model = build_model(ModelConfig(model_class="vector", **TINY))
    res = train(model, *data, TrainConfig(epochs=50, batch_size=48, lr=0.5, patience=1))
    assert res.stopped_early and len(res.history) < 50


def test_nonfinite_loss_aborts(data):
    model = small_model("vector")
    model.store.view("out.W")[...] = np.nan
    with pytest.raises(TrainingError, match="non-finite"):
        train(model, *data, TrainConfig(epochs=1))


def test_zero_epochs_is_a_noop(data):
    model = small_model("vector")
    before = model.store.values.copy()
    res = train(model, *data, TrainConfig(epochs=0))
    assert res.history == [] and np.array_equal(model.store.values, before)


@pytest.mark.parametrize("bad", [dict(augment="flip"), dict(epochs=-1), dict(batch_size=0), dict(patience=0)])
def test_invalid_train_config(bad):
    with pytest.raises(ConfigError):
        TrainConfig(**bad)


def test_beam_augmentation_is_a_z_rotation(rng):
    b = Batch.from_dataset(events(10, seed=3))
    out = augment_batch(b, "beam", rng)
    np.testing.assert_allclose(out.p[..., 2], b.p[..., 2], atol=1e-12)
    np.testing.assert_allclose(np.linalg.norm(out.p[..., :2], axis=-1), np.linalg.norm(b.p[..., :2], axis=-1),
                               atol=1e-9)
    assert augment_batch(b, "none", rng) is b


def test_jet_augmentation_fixes_the_axis(rng):
    b = Batch.from_dataset(events(10, seed=3))
    out = augment_batch(b, "jet", rng)
    np.testing.assert_allclose(out.jhat, b.jhat, atol=1e-12)
    dots = lambda x: np.einsum("bpi,bi->bp", x, b.jhat)
    np.testing.assert_allclose(dots(out.a), dots(b.a), atol=1e-9)
    assert np.max(np.abs(out.a - b.a)) > 1e-3


def test_one_step_gradient_is_used(data):
    """A single Adam step moves every parameter that received gradient by about lr."""
    model = small_model("vector", seed=4)
    batch = Batch.from_dataset(data[0])
    tape = Tape()
    backward(tape, model.loss(tape, batch))
    g = model.store.grads.copy()
    before = model.store.values.copy()
    train(model, data[0], data[1], TrainConfig(epochs=1, batch_size=len(data[0]), lr=1e-3))
    moved = np.abs(model.store.values - before)
    active = np.abs(g) > 1e-5
    np.testing.assert_allclose(moved[active], 1e-3, rtol=1e-2)

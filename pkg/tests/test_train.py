import json

import numpy as np
import pytest

from app_tpp import synth
from app_tpp.events import split_dataset
from app_tpp.model import APPModel
from app_tpp.nn import NumericalError
from app_tpp.train import TrainConfig, evaluate_loss, format_log, train
from helpers import tiny_config


@pytest.fixture(scope="module")
def poisson():
    return synth.gen_poisson(synth.PoissonSpec(2.0), 30, 15, seed=1)


def test_train_config_validation():
    d = TrainConfig()
    assert (d.epochs, d.batch_size, d.learning_rate, d.grad_clip, d.val_fraction, d.eval_samples) == (1500, 32, 1e-3, 5.0, 0.3, 1500)
    for bad in (dict(epochs=-1), dict(batch_size=0), dict(val_fraction=1.0), dict(val_fraction=0.0), dict(learning_rate=0.0)):
        with pytest.raises(ValueError):
            TrainConfig(**bad)


def test_training_is_deterministic(poisson):
    tc = TrainConfig(epochs=3, batch_size=8, seed=4)
    m1, h1 = train(poisson, tiny_config(1), tc)
    m2, h2 = train(poisson, tiny_config(1), tc)
    assert format_log(h1) == format_log(h2)
    for k in m1.store.values:
        np.testing.assert_array_equal(m1.store.values[k], m2.store.values[k])
    _, h3 = train(poisson, tiny_config(1), TrainConfig(epochs=3, batch_size=8, seed=5))
    assert format_log(h3) != format_log(h1)


def test_selection_takes_validation_minimum(poisson):
    tc = TrainConfig(epochs=6, batch_size=8, learning_rate=0.02)
    model, history = train(poisson, tiny_config(1, "app_lstm", delta_tau=0.1), tc)
    epochs, summary = history[:-1], history[-1]
    assert [r["epoch"] for r in epochs] == list(range(7))
    assert epochs[0]["train"] is None
    objectives = [r["val"]["objective"] for r in epochs]
    assert summary["selected_epoch"] == int(np.argmin(objectives))
    assert summary["best_val_objective"] == min(objectives)
    assert objectives[summary["selected_epoch"]] <= objectives[0]
    # the returned parameters are the selected epoch's
    _, val = split_dataset(poisson, 0.7, tc.seed)
    assert evaluate_loss(model, val, 0)["time_nll"] <= epochs[0]["val"]["time_nll"] + 1e-12


def test_training_improves_rate_fit(poisson):
    tc = TrainConfig(epochs=15, batch_size=8, learning_rate=0.03)
    _, history = train(poisson, tiny_config(1, "app_lstm", delta_tau=0.1), tc)
    assert history[-1]["best_val_objective"] < history[0]["val"]["objective"] - 0.1


@pytest.mark.parametrize("variant", ["app_vae", "app_vae_fixed_prior", "td_lstm"])
def test_all_variants_train(variant, poisson):
    model, history = train(poisson, tiny_config(1, variant), TrainConfig(epochs=2, batch_size=16))
    assert model.config.variant == variant
    assert np.isfinite(history[-1]["best_val_objective"])


def test_explicit_validation_and_k_mismatch(poisson):
    val = synth.gen_poisson(synth.PoissonSpec(2.0), 5, 10, seed=9)
    _, history = train(poisson, tiny_config(1), TrainConfig(epochs=1), validation=val)
    assert np.isfinite(history[0]["val"]["objective"])
    with pytest.raises(ValueError, match="K="):
        train(poisson, tiny_config(3), TrainConfig(epochs=1))


def test_non_finite_loss_names_batch(poisson, monkeypatch):
    original = APPModel.create

    def broken(config, seed=0):
        m = original(config, seed)
        m.store.values["dec.t3.b"][:] = np.nan
        return m

    monkeypatch.setattr(APPModel, "create", broken)
    with pytest.raises(NumericalError, match=r"epoch 1, batch 0"):
        train(poisson, tiny_config(1), TrainConfig(epochs=1, batch_size=8))


def test_log_format(poisson):
    _, history = train(poisson, tiny_config(1), TrainConfig(epochs=1))
    lines = format_log(history).splitlines()
    assert len(lines) == 3
    rec = json.loads(lines[1])
    assert set(rec["train"]) == {"total", "action_nll", "time_nll", "kl"}
    assert set(rec["val"]) == {"total", "action_nll", "time_nll", "kl", "objective"}


def test_copy_is_independent(poisson):
    m = APPModel.create(tiny_config(1), seed=0)
    c = m.copy()
    assert evaluate_loss(m, poisson, 0) == evaluate_loss(c, poisson, 0)

import math

import numpy as np
import pytest

from app_tpp import model as M
from app_tpp.events import ActionSequence
from app_tpp.model import APPModel, Batch, GaussianParams, ModelConfig, forward_teacher_forced
from app_tpp.nn import Tape
from helpers import random_sequence, tiny_config


def _zeroed(config):
    m = APPModel.create(config, seed=0)
    for v in m.store.values.values():
        v[...] = 0.0
    return m


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(3, variant="nope")
    with pytest.raises(ValueError):
        ModelConfig(0)
    with pytest.raises(ValueError):
        ModelConfig(3, delta_tau=0.0)
    c = tiny_config(3)
    assert ModelConfig.from_dict(c.to_dict()) == c


def test_defaults():
    c = ModelConfig(5)
    assert (c.hidden_dim, c.latent_dim, c.delta_tau, c.variant) == (128, 256, 1.0, "app_vae")


def test_parameter_sets_per_variant():
    names = {v: set(APPModel.create(tiny_config(3, v)).store.names()) for v in M.VARIANTS}
    assert any(n.startswith("prior.") for n in names["app_vae"])
    assert not any(n.startswith("prior.") for n in names["app_vae_fixed_prior"])
    assert names["app_lstm"] == names["td_lstm"]
    assert not any(n.startswith(("post.", "prior.")) for n in names["app_lstm"])


def test_embedding_shape_and_dependence():
    m = APPModel.create(tiny_config(4), seed=3)
    p = m.bind(Tape())
    e = M.embed_event(p, [0, 3], [0.1, 10.0])
    assert e.shape == (2, m.config.joint_embed_dim)
    assert not np.allclose(M.embed_event(p, 1, 0.1).value, M.embed_event(p, 1, 10.0).value)
    z = _zeroed(tiny_config(4)).bind(Tape())
    assert not M.embed_event(z, 2, 5.0).value.any()
    with pytest.raises(ValueError):
        M.embed_event(p, 4, 1.0)


def test_zero_weights_give_standard_outputs():
    for variant in M.VARIANTS:
        m = _zeroed(tiny_config(3, variant))
        p = m.bind(Tape())
        x = p.tape.constant(np.zeros(m.config.latent_dim if m.config.has_latent else m.config.hidden_dim))
        np.testing.assert_array_equal(M.decode_action(p, x).value, np.full(3, 1 / 3))
        if variant == "td_lstm":
            assert float(M.decode_tau_hat(p, x).value) == pytest.approx(math.log(2.0))
        else:
            assert float(M.decode_time(p, x).value) == 1.0
    p = _zeroed(tiny_config(3)).bind(Tape())
    state = M.begin_state(p, "post")
    _, g = M.posterior_step(p, state, M.embed_event(p, 1, 2.0))
    assert not g.mean.value.any() and not g.log_var.value.any()


def test_log_var_clamped_and_lambda_clamped():
    m = APPModel.create(tiny_config(3), seed=0)
    m.store.values["post.head2.b"][:] = 1e3
    m.store.values["dec.t3.b"][:] = 20.0
    p = m.bind(Tape())
    _, g = M.posterior_step(p, M.begin_state(p, "post"), M.embed_event(p, 0, 1.0))
    assert (g.log_var.value == M.LOG_VAR_BOUND).all()
    lam = float(M.decode_time(p, p.tape.constant(np.zeros(m.config.latent_dim))).value)
    assert lam == pytest.approx(1e6) and math.isfinite(lam)


def test_posterior_and_prior_depend_on_history():
    m = APPModel.create(tiny_config(4), seed=5)
    p = m.bind(Tape())
    means = []
    for first in (0, 3):
        s = M.begin_state(p, "post")
        s, _ = M.posterior_step(p, s, M.embed_event(p, first, 0.5))
        _, g = M.posterior_step(p, s, M.embed_event(p, 1, 0.5))
        means.append(g.mean.value)
    assert not np.allclose(*means)
    priors = []
    for first in (0, 3):
        s = M.begin_state(p, "prior")
        _, g = M.prior_step(p, s, M.embed_event(p, first, 0.5))
        priors.append(g.mean.value)
    assert not np.allclose(*priors)


def test_fixed_prior_is_standard_normal():
    m = APPModel.create(tiny_config(3, "app_vae_fixed_prior"), seed=1)
    p = m.bind(Tape())
    _, g = M.prior_step(p, None, M.embed_event(p, 2, 0.3))
    assert not g.mean.value.any() and not g.log_var.value.any()
    seq = ActionSequence.from_arrays([0, 1, 2], [1.0, 2.0, 0.5])
    enc = M.encode(p, Batch.from_sequences([seq]))
    assert not enc["prior"].mean.value.any()


def test_sample_latent():
    t = Tape()
    mean = t.constant([1.0, -2.0, 0.5])
    g = GaussianParams(mean, t.constant(np.zeros(3)))
    assert np.array_equal(M.sample_latent(g, np.zeros(3)).value, mean.value)
    assert M.sample_latent(g, [1.0, 0, 0]).value.tolist() == [2.0, -2.0, 0.5]
    lv = np.array([-1.0, 0.0, 1.5])
    draws = M.sample_latent(GaussianParams(t.constant(np.zeros((1, 3))), t.constant(lv)),
                            np.random.default_rng(0).standard_normal((100_000, 3))).value
    var = draws.var(axis=0, ddof=1)
    se = np.exp(lv) * math.sqrt(2 / (draws.shape[0] - 1))
    assert (np.abs(var - np.exp(lv)) < 3 * se).all()


def test_decoder_contracts():
    m = APPModel.create(tiny_config(5), seed=2)
    p = m.bind(Tape())
    z = p.tape.constant(np.random.default_rng(0).normal(0, 3, (1000, m.config.latent_dim)))
    probs = M.decode_action(p, z).value
    np.testing.assert_allclose(probs.sum(axis=-1), 1.0, atol=1e-12)
    assert (M.decode_time(p, z).value > 0).all()
    before = probs.argmax(axis=-1)
    m.store.values["dec.a3.b"] += 7.5
    after = M.decode_action(m.bind(Tape()), z).value.argmax(axis=-1)
    assert np.array_equal(before, after)


def test_baseline_step():
    for variant in ("app_lstm", "td_lstm"):
        m = APPModel.create(tiny_config(3, variant), seed=0)
        p = m.bind(Tape())
        s, (probs, t) = M.baseline_step(p, M.begin_state(p, "enc"), M.embed_event(p, 1, 0.4))
        assert probs.value.sum() == pytest.approx(1.0)
        assert float(t.value) >= 0
    p = APPModel.create(tiny_config(3), seed=0).bind(Tape())
    with pytest.raises(ValueError):
        M.baseline_step(p, None, None)


def test_forward_shapes_and_determinism():
    m = APPModel.create(tiny_config(4), seed=0)
    seq = random_sequence(np.random.default_rng(0), 4, 6)
    noise = np.random.default_rng(1).standard_normal((6, 4))
    a = forward_teacher_forced(m.bind(Tape()), seq, noise, use_posterior_sampling=False)
    b = forward_teacher_forced(m.bind(Tape()), seq, noise, use_posterior_sampling=False)
    assert a.action_log_probs.shape == (1, 6, 4) and a.lam.shape == (1, 6) and a.z.shape == (1, 6, 4)
    assert len(a) == 6
    np.testing.assert_array_equal(a.lam.value, b.lam.value)
    with pytest.raises(ValueError):
        forward_teacher_forced(m.bind(Tape()), seq, None)
    with pytest.raises(ValueError):
        forward_teacher_forced(m.bind(Tape()), ActionSequence(()), noise)


@pytest.mark.parametrize("variant", M.VARIANTS)
def test_prior_side_never_sees_current_event(variant):
    """Everything used for prediction at step n is unchanged when x_n..x_N change."""
    m = APPModel.create(tiny_config(4, variant), seed=3)
    g = np.random.default_rng(0)
    seq = random_sequence(g, 4, 6)
    noise = g.standard_normal((6, 4))
    n = 3
    mutated = ActionSequence.from_arrays(
        np.concatenate([seq.categories[:n], (seq.categories[n:] + 1) % 4]),
        np.concatenate([seq.inter_arrivals[:n], seq.inter_arrivals[n:] + 2.0]),
    )
    a = forward_teacher_forced(m.bind(Tape()), seq, noise, use_posterior_sampling=False)
    b = forward_teacher_forced(m.bind(Tape()), mutated, noise, use_posterior_sampling=False)
    np.testing.assert_array_equal(a.action_log_probs.value[:, : n + 1], b.action_log_probs.value[:, : n + 1])
    if a.prior is not None:
        np.testing.assert_array_equal(a.prior.mean.value[:, : n + 1], b.prior.mean.value[:, : n + 1])
        # the posterior at step n does see x_n
        assert not np.array_equal(a.posterior.mean.value[:, n], b.posterior.mean.value[:, n])


def test_bos_prior_identical_across_sequences():
    m = APPModel.create(tiny_config(4), seed=3)
    g = np.random.default_rng(1)
    batch = Batch.from_sequences([random_sequence(g, 4, 3), random_sequence(g, 4, 5)])
    enc = M.encode(m.bind(Tape()), batch)
    np.testing.assert_array_equal(enc["prior"].mean.value[0, 0], enc["prior"].mean.value[1, 0])


def test_batch_matches_single_sequences():
    m = APPModel.create(tiny_config(4), seed=3)
    g = np.random.default_rng(2)
    seqs = [random_sequence(g, 4, n) for n in (2, 5)]
    enc = M.encode(m.bind(Tape()), Batch.from_sequences(seqs))
    for i, s in enumerate(seqs):
        one = M.encode(m.bind(Tape()), Batch.from_sequences([s]))
        np.testing.assert_allclose(enc["posterior"].mean.value[i, : len(s)], one["posterior"].mean.value[0], atol=1e-14)


def test_save_load_round_trip(tmp_path):
    m = APPModel.create(tiny_config(3, "app_lstm"), seed=9)
    path = tmp_path / "m.ck"
    m.save(path, {"note": 1})
    back = APPModel.load(path)
    assert back.config == m.config
    for k, v in m.store.values.items():
        np.testing.assert_array_equal(back.store.values[k], v)
    with pytest.raises(ValueError, match="variant"):
        APPModel.load(path, variant="app_vae")
    c = m.copy()
    c.store.values["bos"] += 1
    assert not np.array_equal(c.store.values["bos"], m.store.values["bos"])

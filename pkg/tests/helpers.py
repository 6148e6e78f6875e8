"""Builders shared by the test modules."""
import numpy as np

from app_tpp.events import ActionSequence, Dataset
from app_tpp.model import APPModel, ModelConfig


def tiny_config(K=4, variant="app_vae", **kw) -> ModelConfig:
    dims = dict(action_embed_dim=6, time_embed_dim=4, joint_embed_dim=8, hidden_dim=8,
                latent_dim=4, head_hidden_dim=8, decoder_hidden_dim=8)
    dims.update(kw)
    return ModelConfig(K, variant=variant, **dims)


def random_sequence(g: np.random.Generator, K: int, n: int) -> ActionSequence:
    return ActionSequence.from_arrays(g.integers(0, K, n), g.exponential(1.0, n))


def constant_model(K=3, logits=(0.0, 2.0, -1.0), log_lam=0.5, variant="app_vae", seed=0, **kw) -> APPModel:
    """A model whose decoders ignore their input and, for latent variants, prior == posterior.

    The action decoder always returns softmax(logits) and the time decoder exp(log_lam).
    """
    model = APPModel.create(tiny_config(K, variant, **kw), seed=seed)
    v = model.store.values
    for head in ("a", "t"):
        v[f"dec.{head}1.W"][:] = 0.0
    v["dec.a3.b"][:] = logits
    v["dec.t3.b"][:] = log_lam
    if variant == "app_vae":
        v["prior.head2.W"][:] = 0.0
        v["post.head2.W"][:] = 0.0
        bias = np.random.default_rng(seed).normal(0, 0.5, v["prior.head2.b"].shape)
        v["prior.head2.b"][:] = bias
        v["post.head2.b"][:] = bias
    return model


def exact_constant_ll(model: APPModel, seq: ActionSequence) -> np.ndarray:
    """Per-step log-likelihood of a constant model, computed directly from its biases."""
    v, c = model.store.values, model.config
    logits = v["dec.a3.b"]
    logp = logits - np.log(np.sum(np.exp(logits)))
    lam = np.exp(v["dec.t3.b"][0])
    taus = seq.inter_arrivals
    return logp[seq.categories] + np.log(-np.expm1(-lam * c.delta_tau)) - lam * taus

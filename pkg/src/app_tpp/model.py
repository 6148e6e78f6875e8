"""APP-VAE and its deterministic baselines.

Shapes: B sequences, N steps, K categories, J joint embedding width,
H recurrent width, L latent width. Every step function works on arbitrary
leading batch axes.

Both recurrent branches first consume a learned begin-of-sequence vector, so
the prior branch yields the distribution for step 1 before seeing any event,
and after consuming ``x_1..x_n`` yields the distribution for step ``n + 1``.
The posterior branch emits its Gaussian for step ``n`` after consuming ``x_n``.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from typing import Sequence

import numpy as np

from . import nn
from .events import ActionSequence
from .nn import LSTMWeights, RecurrentState, Tape, Var

VARIANTS = ("app_vae", "app_vae_fixed_prior", "app_lstm", "td_lstm")
LATENT_VARIANTS = ("app_vae", "app_vae_fixed_prior")
LOG_VAR_BOUND = 10.0
LAMBDA_MIN, LAMBDA_MAX = 1e-6, 1e6


@dataclass(frozen=True)
class ModelConfig:
    num_categories: int
    action_embed_dim: int = 64
    time_embed_dim: int = 16
    joint_embed_dim: int = 128
    hidden_dim: int = 128
    latent_dim: int = 256
    head_hidden_dim: int = 128
    decoder_hidden_dim: int = 128
    delta_tau: float = 1.0
    variant: str = "app_vae"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; choose from {VARIANTS}")
        for f in fields(self):
            if f.type in ("int", int) and getattr(self, f.name) < 1:
                raise ValueError(f"{f.name} must be >= 1, got {getattr(self, f.name)}")
        if not self.delta_tau > 0:
            raise ValueError(f"delta_tau must be positive, got {self.delta_tau}")

    @property
    def has_latent(self) -> bool:
        return self.variant in LATENT_VARIANTS

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass
class GaussianParams:
    mean: Var
    log_var: Var


@dataclass(frozen=True)
class StepDistribution:
    action_probs: np.ndarray
    lam: float


@dataclass
class Batch:
    """Right-padded sequences; padded slots hold category 0 and time 0."""

    categories: np.ndarray  # (B, N) int
    taus: np.ndarray  # (B, N) float
    mask: np.ndarray  # (B, N) float, 1 on real events

    @classmethod
    def from_sequences(cls, sequences: Sequence[ActionSequence]) -> "Batch":
        if len(sequences) == 0:
            raise ValueError("empty batch")
        n = max(len(s) for s in sequences)
        cats = np.zeros((len(sequences), n), dtype=np.int64)
        taus = np.zeros((len(sequences), n))
        mask = np.zeros((len(sequences), n))
        for i, s in enumerate(sequences):
            if len(s) == 0:
                raise ValueError("empty sequence")
            cats[i, : len(s)] = s.categories
            taus[i, : len(s)] = s.inter_arrivals
            mask[i, : len(s)] = 1.0
        return cls(cats, taus, mask)

    @property
    def lengths(self) -> np.ndarray:
        return self.mask.sum(axis=1)

    def __len__(self):
        return self.categories.shape[0]


def as_batch(data) -> Batch:
    if isinstance(data, Batch):
        return data
    if isinstance(data, ActionSequence):
        return Batch.from_sequences([data])
    return Batch.from_sequences(list(data))


# ---------------------------------------------------------------- parameters


class APPModel:
    """A model configuration plus its parameter store; doubles as the checkpoint object."""

    def __init__(self, config: ModelConfig, store: nn.ParameterStore):
        self.config = config
        self.store = store

    @classmethod
    def create(cls, config: ModelConfig, seed: int = 0) -> "APPModel":
        g = nn.rng_mod.stream(seed, 0x1A17)
        store = nn.ParameterStore()
        c = config
        K, A, T, J, H = c.num_categories, c.action_embed_dim, c.time_embed_dim, c.joint_embed_dim, c.hidden_dim

        def dense(name, n_out, n_in):
            nn.init_uniform(store, f"{name}.W", (n_out, n_in), n_in, g)
            store.add(f"{name}.b", np.zeros(n_out))

        dense("emb.a1", A, K)
        dense("emb.a2", A, A)
        dense("emb.t1", T, 1)
        dense("emb.t2", T, T)
        dense("emb.x", J, A + T)
        nn.init_uniform(store, "bos", (J,), J, g)

        def lstm(name):
            nn.init_uniform(store, f"{name}.W", (4 * H, J + H), J + H, g)
            store.add(f"{name}.b", np.zeros(4 * H))

        if c.has_latent:
            branches = ["post"] if c.variant == "app_vae_fixed_prior" else ["post", "prior"]
            for branch in branches:
                lstm(f"{branch}.lstm")
                dense(f"{branch}.head1", c.head_hidden_dim, H)
                dense(f"{branch}.head2", 2 * c.latent_dim, c.head_hidden_dim)
            dec_in = c.latent_dim
        else:
            lstm("enc.lstm")
            dec_in = H
        D = c.decoder_hidden_dim
        dense("dec.a1", D, dec_in)
        dense("dec.a2", D, D)
        dense("dec.a3", K, D)
        dense("dec.t1", D, dec_in)
        dense("dec.t2", D, D)
        dense("dec.t3", 1, D)
        return cls(config, store)

    def bind(self, tape: Tape) -> "Params":
        return Params(self, tape)

    def save(self, path, meta: dict | None = None) -> None:
        nn.save_checkpoint(path, self.store.values, self.config.to_dict(), meta)

    @classmethod
    def load(cls, path, variant: str | None = None) -> "APPModel":
        values, config, _ = nn.load_checkpoint(path)
        cfg = ModelConfig.from_dict(config)
        if variant is not None and cfg.variant != variant:
            raise ValueError(f"{path}: checkpoint holds variant {cfg.variant!r}, expected {variant!r}")
        model = cls.create(cfg, seed=0)
        if set(values) != set(model.store.values):
            raise ValueError(f"{path}: parameter names do not match variant {cfg.variant!r}")
        model.store.load(values)
        return model

    def copy(self) -> "APPModel":
        clone = APPModel.create(self.config, seed=0)
        clone.store.load(self.store.snapshot())
        return clone


class Params:
    """Parameters of one model bound to one tape; each array becomes a single leaf."""

    def __init__(self, model: APPModel, tape: Tape):
        self.model = model
        self.config = model.config
        self.tape = tape
        self._vars: dict[str, Var] = {}

    def __getitem__(self, name: str) -> Var:
        v = self._vars.get(name)
        if v is None:
            v = self._vars[name] = self.tape.param(self.model.store, name)
        return v

    def dense(self, name: str, x: Var) -> Var:
        return nn.linear(self.tape, self[f"{name}.W"], self[f"{name}.b"], x)

    def lstm(self, name: str) -> LSTMWeights:
        return LSTMWeights(self[f"{name}.W"], self[f"{name}.b"])


# ---------------------------------------------------------------- building blocks


def embed_event(params: Params, category_id, inter_arrival) -> Var:
    """Two-branch embedding of (category, inter-arrival) into the joint space."""
    tape, c = params.tape, params.config
    taus = np.asarray(inter_arrival, dtype=np.float64)
    a = nn.one_hot(tape, category_id, c.num_categories)
    a = nn.relu(tape, params.dense("emb.a1", a))
    a = nn.relu(tape, params.dense("emb.a2", a))
    t = tape.constant(taus[..., None])
    t = nn.relu(tape, params.dense("emb.t1", t))
    t = nn.relu(tape, params.dense("emb.t2", t))
    return params.dense("emb.x", nn.concat(tape, [a, t]))


def bos(params: Params, batch_shape=()) -> Var:
    v = params["bos"]
    if batch_shape:
        v = v + np.zeros((*batch_shape, params.config.joint_embed_dim))
    return v


def begin_state(params: Params, branch: str, batch_shape=()) -> RecurrentState:
    """Zero recurrent state of ``branch`` with the begin-of-sequence token consumed."""
    zero = nn.lstm_zero_state(params.tape, params.config.hidden_dim, batch_shape)
    return nn.lstm_step(params.tape, params.lstm(f"{branch}.lstm"), zero, bos(params, batch_shape))


def gaussian_head(params: Params, branch: str, h: Var) -> GaussianParams:
    tape, L = params.tape, params.config.latent_dim
    out = params.dense(f"{branch}.head2", nn.relu(tape, params.dense(f"{branch}.head1", h)))
    mean = out[..., :L]
    log_var = nn.clip(tape, out[..., L:], -LOG_VAR_BOUND, LOG_VAR_BOUND)
    return GaussianParams(mean, log_var)


def posterior_step(params: Params, state: RecurrentState, x_emb: Var) -> tuple[RecurrentState, GaussianParams]:
    state = nn.lstm_step(params.tape, params.lstm("post.lstm"), state, x_emb)
    return state, gaussian_head(params, "post", state.h)


def standard_normal_params(params: Params, batch_shape=()) -> GaussianParams:
    zeros = np.zeros((*batch_shape, params.config.latent_dim))
    return GaussianParams(params.tape.constant(zeros), params.tape.constant(zeros.copy()))


def prior_step(params: Params, state: RecurrentState | None, x_emb: Var) -> tuple[RecurrentState | None, GaussianParams]:
    """Consume one input (an event embedding or BOS); return the next step's prior."""
    if params.config.variant == "app_vae_fixed_prior":
        return state, standard_normal_params(params, x_emb.shape[:-1])
    state = nn.lstm_step(params.tape, params.lstm("prior.lstm"), state, x_emb)
    return state, gaussian_head(params, "prior", state.h)


def sample_latent(gauss: GaussianParams, noise) -> Var:
    """Reparameterized draw ``mean + exp(log_var / 2) * noise``."""
    tape = gauss.mean.tape
    std = nn.exp(tape, nn.scale(gauss.log_var, 0.5))
    return gauss.mean + std * tape.constant(noise)


def action_logits(params: Params, z: Var) -> Var:
    tape = params.tape
    h = nn.relu(tape, params.dense("dec.a1", z))
    h = nn.relu(tape, params.dense("dec.a2", h))
    return params.dense("dec.a3", h)


def decode_action(params: Params, z: Var) -> Var:
    return nn.softmax(params.tape, action_logits(params, z))


def decode_action_log_probs(params: Params, z: Var) -> Var:
    return nn.log_softmax(params.tape, action_logits(params, z))


def time_output(params: Params, z: Var) -> Var:
    """Pre-activation of the time decoder, shape (..., )."""
    tape = params.tape
    h = nn.relu(tape, params.dense("dec.t1", z))
    h = nn.relu(tape, params.dense("dec.t2", h))
    return params.dense("dec.t3", h)[..., 0]


def decode_time(params: Params, z: Var) -> Var:
    """Intensity exp(MLP(z)), clamped to [1e-6, 1e6]."""
    pre = nn.clip(params.tape, time_output(params, z), math.log(LAMBDA_MIN), math.log(LAMBDA_MAX))
    return nn.exp(params.tape, pre)


def decode_tau_hat(params: Params, h: Var) -> Var:
    return nn.softplus(params.tape, time_output(params, h))


def baseline_step(params: Params, state: RecurrentState, x_emb: Var):
    """Advance a baseline encoder by one input and decode the next step.

    Returns ``(state, (action_probs, lam))`` for app_lstm and
    ``(state, (action_probs, tau_hat))`` for td_lstm.
    """
    variant = params.config.variant
    if variant not in ("app_lstm", "td_lstm"):
        raise ValueError(f"baseline_step called on variant {variant!r}")
    state = nn.lstm_step(params.tape, params.lstm("enc.lstm"), state, x_emb)
    probs = decode_action(params, state.h)
    if variant == "app_lstm":
        return state, (probs, decode_time(params, state.h))
    return state, (probs, decode_tau_hat(params, state.h))


# ---------------------------------------------------------------- teacher-forced pass


@dataclass
class ForwardTrace:
    """Batched per-step outputs of a teacher-forced pass (Vars of shape (B, N, ...))."""

    action_log_probs: Var
    lam: Var | None
    tau_hat: Var | None
    posterior: GaussianParams | None
    prior: GaussianParams | None
    z: Var | None
    batch: Batch

    def __len__(self):
        return self.batch.categories.shape[1]

    def step(self, n: int, b: int = 0) -> dict:
        """Plain-array view of step ``n`` of sequence ``b``."""
        out = {"dist": StepDistribution(np.exp(self.action_log_probs.value[b, n]),
                                        float(self.lam.value[b, n]) if self.lam is not None else float("nan"))}
        for key in ("posterior", "prior"):
            g = getattr(self, key)
            if g is not None:
                out[key] = GaussianParams(g.mean.value[b, n], g.log_var.value[b, n])
        if self.z is not None:
            out["z"] = self.z.value[b, n]
        if self.tau_hat is not None:
            out["tau_hat"] = float(self.tau_hat.value[b, n])
        return out


def _run_branch(params: Params, branch: str, x_emb: Var, shifted: bool) -> Var:
    """Hidden states of one LSTM branch over all steps, stacked to (B, N, H).

    ``shifted=True`` gives the state before each event (after BOS and x_1..x_{n-1}).
    """
    tape = params.tape
    B, N = x_emb.shape[0], x_emb.shape[1]
    state = begin_state(params, branch, (B,))
    weights = params.lstm(f"{branch}.lstm")
    hs = []
    if shifted:
        hs.append(state.h)
        for n in range(N - 1):
            state = nn.lstm_step(tape, weights, state, x_emb[:, n])
            hs.append(state.h)
    else:
        for n in range(N):
            state = nn.lstm_step(tape, weights, state, x_emb[:, n])
            hs.append(state.h)
    return nn.stack(tape, hs, axis=1)


def encode(params: Params, batch: Batch) -> dict:
    """Run the recurrent branches; returns hidden states and Gaussian parameters."""
    x_emb = embed_event(params, batch.categories, batch.taus)
    c = params.config
    out = {}
    if not c.has_latent:
        out["h"] = _run_branch(params, "enc", x_emb, shifted=True)
        return out
    out["posterior"] = gaussian_head(params, "post", _run_branch(params, "post", x_emb, shifted=False))
    if c.variant == "app_vae_fixed_prior":
        out["prior"] = standard_normal_params(params, batch.categories.shape)
    else:
        out["prior"] = gaussian_head(params, "prior", _run_branch(params, "prior", x_emb, shifted=True))
    return out


def forward_teacher_forced(params: Params, sequence, noise=None, use_posterior_sampling: bool = True) -> ForwardTrace:
    """Teacher-forced pass over ground-truth events.

    ``noise`` has shape (B, N, L) (or (N, L) for a single sequence) and is
    required for latent variants. With ``use_posterior_sampling`` the latent of
    step n comes from the posterior given x_1..x_n, otherwise from the prior
    given x_1..x_{n-1}.
    """
    batch = as_batch(sequence)
    if batch.categories.shape[1] == 0:
        raise ValueError("empty sequence")
    c = params.config
    enc = encode(params, batch)
    if not c.has_latent:
        h = enc["h"]
        logp = decode_action_log_probs(params, h)
        if c.variant == "app_lstm":
            return ForwardTrace(logp, decode_time(params, h), None, None, None, None, batch)
        return ForwardTrace(logp, None, decode_tau_hat(params, h), None, None, None, batch)

    if noise is None:
        raise ValueError("latent variants need a noise array")
    noise = np.asarray(noise, dtype=np.float64)
    shape = (*batch.categories.shape, c.latent_dim)
    if noise.shape != shape:
        noise = noise.reshape(shape)
    source = enc["posterior"] if use_posterior_sampling else enc["prior"]
    z = sample_latent(source, noise)
    return ForwardTrace(
        decode_action_log_probs(params, z),
        decode_time(params, z),
        None,
        enc["posterior"],
        enc["prior"],
        z,
        batch,
    )

"""Likelihood estimation, prediction, generation and analysis for trained models.

Everything here runs without recording a tape. Monte Carlo draws for step
``n`` of a sequence come from ``rng.stream(seed, sequence_key, n, purpose)``
where ``sequence_key`` hashes the sequence content, so results do not depend
on evaluation order, batching or thread count, and identical sequences get
identical scores.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import nn, rng
from .events import ActionEvent, ActionSequence, Dataset, split_dataset
from .model import (
    APPModel,
    Batch,
    GaussianParams,
    ModelConfig,
    StepDistribution,
    begin_state,
    bos,
    decode_action,
    decode_action_log_probs,
    decode_tau_hat,
    decode_time,
    embed_event,
    encode,
    prior_step,
)
from .nn import Tape
from .objective import kl_diag_gaussians
from .train import train

_IS, _PREDICT, _GENERATE, _TRAVERSE = 1, 2, 3, 4
_LOG_2PI = math.log(2.0 * math.pi)
_MAX_ROWS = 200_000  # decoder rows per chunk


def _params(model: APPModel):
    return model.bind(Tape(record=False))


def _seq_key(seq: ActionSequence) -> int:
    return rng.content_key(seq.categories, seq.inter_arrivals)


def _encode_one(model: APPModel, seq: ActionSequence) -> dict:
    enc = encode(_params(model), Batch.from_sequences([seq]))
    out = {}
    for k, v in enc.items():
        if isinstance(v, GaussianParams):
            out[k] = GaussianParams(v.mean.value[0], v.log_var.value[0])
        else:
            out[k] = v.value[0]
    return out


def _decode(model: APPModel, z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Action log-probabilities (..., K) and intensities (...) for a latent array."""
    params = _params(model)
    zv = params.tape.constant(z)
    return decode_action_log_probs(params, zv).value, decode_time(params, zv).value


def log_normal_diag(z: np.ndarray, g: GaussianParams) -> np.ndarray:
    return -0.5 * np.sum(_LOG_2PI + g.log_var + (z - g.mean) ** 2 * np.exp(-g.log_var), axis=-1)


def time_log_prob(lam, tau, delta_tau: float):
    """log P(tau <= T < tau + delta_tau) for T ~ Exponential(lam)."""
    x = np.asarray(lam) * delta_tau
    with np.errstate(divide="ignore", invalid="ignore"):
        log1mexp = np.where(x < math.log(2.0), np.log(-np.expm1(-x)), np.log1p(-np.exp(-x)))
    return log1mexp - np.asarray(lam) * tau


def _draw(seed: int, key: int, steps: range, purpose: int, shape) -> np.ndarray:
    """Stack per-step standard-normal draws into (S, len(steps), L)."""
    return np.stack([rng.stream(seed, key, n, purpose).standard_normal(shape) for n in steps], axis=1)


def _step_chunks(n_steps: int, samples: int):
    width = max(1, _MAX_ROWS // max(samples, 1))
    for start in range(0, n_steps, width):
        yield range(start, min(n_steps, start + width))


# ---------------------------------------------------------------- likelihood


def exact_step_ll(model: APPModel, sequence: ActionSequence) -> np.ndarray:
    """Per-step log-likelihood of a model without a latent (app_lstm)."""
    c = model.config
    if c.variant != "app_lstm":
        raise ValueError(f"exact likelihood is only defined for app_lstm, not {c.variant!r}")
    h = _encode_one(model, sequence)["h"]
    logp, lam = _decode(model, h)
    cats, taus = sequence.categories, sequence.inter_arrivals
    return logp[np.arange(len(cats)), cats] + time_log_prob(lam, taus, c.delta_tau)


def importance_sampled_ll(model: APPModel, sequence: ActionSequence, samples: int = 1500, seed: int = 0) -> np.ndarray:
    """Per-step estimates of log p(x_n | x_1..x_{n-1}).

    Latents are drawn from the posterior and weighted by prior / posterior
    density. Models without a latent return the exact value.
    """
    if samples < 1:
        raise ValueError("samples must be >= 1")
    c = model.config
    if not c.has_latent:
        return exact_step_ll(model, sequence)
    enc = _encode_one(model, sequence)
    post, prior = enc["posterior"], enc["prior"]
    cats, taus = sequence.categories, sequence.inter_arrivals
    key = _seq_key(sequence)
    out = np.empty(len(sequence))
    for steps in _step_chunks(len(sequence), samples):
        idx = np.arange(steps.start, steps.stop)
        q = GaussianParams(post.mean[idx], post.log_var[idx])
        p = GaussianParams(prior.mean[idx], prior.log_var[idx])
        eps = _draw(seed, key, steps, _IS, (samples, c.latent_dim))
        z = q.mean + np.exp(0.5 * q.log_var) * eps  # (S, n, L)
        logp, lam = _decode(model, z)
        log_w = (
            np.take_along_axis(logp, np.broadcast_to(cats[idx], logp.shape[:2])[..., None], axis=-1)[..., 0]
            + time_log_prob(lam, taus[idx], c.delta_tau)
            + (log_normal_diag(z, p) - log_normal_diag(z, q))  # grouped so equal densities cancel exactly
        )
        top = log_w.max(axis=0)
        out[idx] = top + np.log(np.mean(np.exp(log_w - top), axis=0))
    return out


def elbo_per_step(model: APPModel, sequence: ActionSequence, seed: int = 0) -> np.ndarray:
    """Single-sample per-step ELBO: log p(x_n | z) - KL(q || p), z ~ q."""
    c = model.config
    if not c.has_latent:
        return exact_step_ll(model, sequence)
    enc = _encode_one(model, sequence)
    q, p = enc["posterior"], enc["prior"]
    eps = _draw(seed, _seq_key(sequence), range(len(sequence)), _IS, (1, c.latent_dim))[0]
    z = q.mean + np.exp(0.5 * q.log_var) * eps
    logp, lam = _decode(model, z)
    cats, taus = sequence.categories, sequence.inter_arrivals
    recon = logp[np.arange(len(cats)), cats] + time_log_prob(lam, taus, c.delta_tau)
    return recon - kl_diag_gaussians(q, p)


# ---------------------------------------------------------------- prediction


def _aggregate(log_probs: np.ndarray, lam: np.ndarray, strategy: str, tau_from: str) -> tuple[np.ndarray, np.ndarray]:
    """Collapse (S, n, K) sampled distributions into per-step category and expected time."""
    S, n, K = log_probs.shape
    if strategy == "mode":
        votes = log_probs.argmax(axis=-1)  # (S, n)
        counts = np.zeros((n, K), dtype=np.int64)
        for j in range(n):
            counts[j] = np.bincount(votes[:, j], minlength=K)
        category = counts.argmax(axis=-1)  # first maximum, i.e. lowest id on ties
    elif strategy == "average":
        category = np.exp(log_probs).mean(axis=0).argmax(axis=-1)
        votes = log_probs.argmax(axis=-1)
    else:
        raise ValueError(f"strategy must be 'mode' or 'average', got {strategy!r}")
    inv = 1.0 / lam
    if tau_from == "all":
        expected = inv.mean(axis=0)
    elif tau_from == "mode":
        agree = votes == category[None, :]
        expected = np.where(agree.any(axis=0), (inv * agree).sum(axis=0) / np.maximum(agree.sum(axis=0), 1), inv.mean(axis=0))
    else:
        raise ValueError(f"tau_from must be 'all' or 'mode', got {tau_from!r}")
    return category, expected


def predict_steps(model: APPModel, sequence: ActionSequence, samples: int = 1500, strategy: str = "mode",
                  seed: int = 0, tau_from: str = "all") -> tuple[np.ndarray, np.ndarray]:
    """Teacher-forced next-event predictions for every step of ``sequence``.

    The prediction at step n uses only x_1..x_{n-1}. Returns (categories, expected inter-arrivals).
    """
    c = model.config
    enc = _encode_one(model, sequence)
    if c.variant == "app_lstm":
        logp, lam = _decode(model, enc["h"])
        return logp.argmax(axis=-1), 1.0 / lam
    if c.variant == "td_lstm":
        params = _params(model)
        h = params.tape.constant(enc["h"])
        return decode_action(params, h).value.argmax(axis=-1), decode_tau_hat(params, h).value
    if samples < 1:
        raise ValueError("samples must be >= 1")
    prior = enc["prior"]
    key = _seq_key(sequence)
    cats = np.empty(len(sequence), dtype=np.int64)
    taus = np.empty(len(sequence))
    for steps in _step_chunks(len(sequence), samples):
        idx = np.arange(steps.start, steps.stop)
        eps = _draw(seed, key, steps, _PREDICT, (samples, c.latent_dim))
        z = prior.mean[idx] + np.exp(0.5 * prior.log_var[idx]) * eps
        logp, lam = _decode(model, z)
        cats[idx], taus[idx] = _aggregate(logp, lam, strategy, tau_from)
    return cats, taus


def predict_next(model: APPModel, history: Sequence[ActionEvent] | ActionSequence, samples: int = 1500,
                 strategy: str = "mode", seed: int = 0, tau_from: str = "all") -> tuple[int, float]:
    """Predict the event following ``history`` (which may be empty)."""
    events = tuple(history)
    # the appended placeholder is never seen by the prediction for its own step
    probe = ActionSequence(events + (ActionEvent(0, 0.0),))
    cats, taus = predict_steps(model, probe, samples, strategy, seed, tau_from)
    return int(cats[-1]), float(taus[-1])


# ---------------------------------------------------------------- reports


@dataclass
class EvalReport:
    ll_per_step: float
    accuracy: float
    mae: float
    per_sequence_ll: list[float] = field(default_factory=list)
    per_sequence_ll_sum: list[float] = field(default_factory=list)
    num_steps: int = 0
    strategy: str = "mode"
    samples: int = 0

    def to_dict(self) -> dict:
        return {
            "ll_per_step": self.ll_per_step,
            "accuracy": self.accuracy,
            "mae": self.mae,
            "num_steps": self.num_steps,
            "strategy": self.strategy,
            "samples": self.samples,
            "per_sequence_ll": self.per_sequence_ll,
            "per_sequence_ll_sum": self.per_sequence_ll_sum,
        }

    def to_text(self) -> str:
        return (
            f"LL per step : {self.ll_per_step:.6f}\n"
            f"accuracy    : {self.accuracy:.2f}\n"
            f"MAE         : {self.mae:.6f}\n"
            f"steps       : {self.num_steps}\n"
            f"strategy    : {self.strategy} (S={self.samples})\n"
        )

    def to_tsv(self) -> str:
        lines = ["sequence\tll_per_step\tll_sum"]
        for i, (m, s) in enumerate(zip(self.per_sequence_ll, self.per_sequence_ll_sum)):
            lines.append(f"{i}\t{m!r}\t{s!r}")
        return "\n".join(lines) + "\n"


def _map(fn, items, threads: int):
    if threads <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def evaluate(model: APPModel, dataset: Dataset, samples: int = 1500, strategy: str = "mode", seed: int = 0,
             threads: int = 1, tau_from: str = "all") -> EvalReport:
    """Teacher-forced accuracy, MAE and likelihood over a dataset."""
    if dataset.num_categories != model.config.num_categories:
        raise ValueError(f"dataset has K={dataset.num_categories}, model expects K={model.config.num_categories}")

    def one(seq):
        cats, taus = predict_steps(model, seq, samples, strategy, seed, tau_from)
        if model.config.variant == "td_lstm":
            ll = np.full(len(seq), np.nan)
        else:
            ll = importance_sampled_ll(model, seq, samples, seed)
        return cats == seq.categories, np.abs(taus - seq.inter_arrivals), ll

    results = _map(one, dataset.sequences, threads)
    hits = np.concatenate([r[0] for r in results])
    errs = np.concatenate([r[1] for r in results])
    lls = [r[2] for r in results]
    return EvalReport(
        ll_per_step=float(np.concatenate(lls).mean()),
        accuracy=100.0 * float(hits.mean()),
        mae=float(errs.mean()),
        per_sequence_ll=[float(x.mean()) for x in lls],
        per_sequence_ll_sum=[float(x.sum()) for x in lls],
        num_steps=int(hits.size),
        strategy=strategy,
        samples=samples,
    )


def anomaly_rank(model: APPModel, dataset: Dataset, samples: int = 1500, seed: int = 0,
                 threads: int = 1) -> list[tuple[int, float]]:
    """Sequences ordered from most to least likely by mean per-step log-likelihood."""
    scores = _map(lambda s: float(importance_sampled_ll(model, s, samples, seed).mean()), dataset.sequences, threads)
    return sorted(enumerate(scores), key=lambda item: (-item[1], item[0]))


# ---------------------------------------------------------------- generation


def generate(model: APPModel, history: Sequence[ActionEvent] | ActionSequence, num_steps: int, seed: int = 0,
             mode: str = "report") -> ActionSequence:
    """Continue ``history`` autoregressively for ``num_steps`` events.

    ``report`` emits the most probable category and the expected time 1/lambda;
    ``stochastic`` samples both. The latent is always drawn from the prior.
    """
    if num_steps < 1:
        raise ValueError("num_steps must be >= 1")
    if mode not in ("report", "stochastic"):
        raise ValueError(f"mode must be 'report' or 'stochastic', got {mode!r}")
    c = model.config
    params = _params(model)
    tape = params.tape
    history = tuple(history)
    g = rng.stream(seed, _GENERATE, rng.content_key([e.category_id for e in history], [e.inter_arrival for e in history]))

    def embed(ev: ActionEvent):
        return embed_event(params, ev.category_id, ev.inter_arrival)

    if c.has_latent:
        state = None if c.variant == "app_vae_fixed_prior" else nn.lstm_zero_state(tape, c.hidden_dim)
        state, gauss = prior_step(params, state, bos(params))
        for ev in history:
            state, gauss = prior_step(params, state, embed(ev))
    else:
        state = begin_state(params, "enc")
        for ev in history:
            state = nn.lstm_step(tape, params.lstm("enc.lstm"), state, embed(ev))

    out = []
    for _ in range(num_steps):
        if c.has_latent:
            z = gauss.mean.value + np.exp(0.5 * gauss.log_var.value) * g.standard_normal(c.latent_dim)
            zv = tape.constant(z)
            probs = decode_action(params, zv).value
            lam = float(decode_time(params, zv).value)
            tau_report = 1.0 / lam
        else:
            hv = state.h
            probs = decode_action(params, hv).value
            if c.variant == "app_lstm":
                lam = float(decode_time(params, hv).value)
                tau_report = 1.0 / lam
            else:
                lam = None
                tau_report = float(decode_tau_hat(params, hv).value)
        if mode == "report":
            cat, tau = int(np.argmax(probs)), tau_report
        else:
            cat = int(g.choice(len(probs), p=probs / probs.sum()))
            tau = float(g.exponential(1.0 / lam)) if lam is not None else tau_report
        ev = ActionEvent(cat, tau)
        out.append(ev)
        if c.has_latent:
            state, gauss = prior_step(params, state, embed(ev))
        else:
            state = nn.lstm_step(tape, params.lstm("enc.lstm"), state, embed(ev))
    return ActionSequence(tuple(out))


# ---------------------------------------------------------------- latent analysis


@dataclass
class Traversal:
    dim: int
    values: np.ndarray
    distributions: list[StepDistribution]
    mean: float
    std: float

    def to_tsv(self) -> str:
        k = len(self.distributions[0].action_probs)
        lines = ["value\tlambda\t" + "\t".join(f"p{j}" for j in range(k))]
        for v, d in zip(self.values, self.distributions):
            lines.append(f"{float(v)!r}\t{d.lam!r}\t" + "\t".join(repr(float(p)) for p in d.action_probs))
        return "\n".join(lines) + "\n"


def latent_traversal(model: APPModel, history: Sequence[ActionEvent] | ActionSequence, dim: int,
                     num_points: int = 11, seed: int = 0) -> Traversal:
    """Sweep latent coordinate ``dim`` over mean +/- 5 std of the next-step prior.

    The remaining coordinates stay at one prior sample.
    """
    c = model.config
    if not c.has_latent:
        raise ValueError(f"variant {c.variant!r} has no latent code to traverse")
    if not 0 <= dim < c.latent_dim:
        raise ValueError(f"dim must be in [0, {c.latent_dim}), got {dim}")
    if num_points < 1:
        raise ValueError("num_points must be >= 1")
    events = tuple(history)
    probe = ActionSequence(events + (ActionEvent(0, 0.0),))
    prior = _encode_one(model, probe)["prior"]
    mu, log_var = prior.mean[-1], prior.log_var[-1]
    std = np.exp(0.5 * log_var)
    z0 = mu + std * rng.stream(seed, _TRAVERSE).standard_normal(c.latent_dim)
    m, s = float(mu[dim]), float(std[dim])
    values = np.array([m]) if num_points == 1 else np.linspace(m - 5.0 * s, m + 5.0 * s, num_points)
    z = np.repeat(z0[None, :], len(values), axis=0)
    z[:, dim] = values
    logp, lam = _decode(model, z)
    dists = [StepDistribution(np.exp(lp), float(l)) for lp, l in zip(logp, lam)]
    return Traversal(dim, values, dists, m, s)


@dataclass
class SweepResult:
    rows: list[tuple[int, float]]

    def to_text(self) -> str:
        sizes = " | ".join(f"{s:>8d}" for s, _ in self.rows)
        lls = " | ".join(f"{ll:>8.3f}" for _, ll in self.rows)
        return f"Latent size | {sizes}\nLL (>=)     | {lls}\n"

    def to_tsv(self) -> str:
        return "latent_size\tval_ll\n" + "".join(f"{s}\t{ll!r}\n" for s, ll in self.rows)


def latent_size_sweep(dataset: Dataset, sizes: Sequence[int], train_config, model_config: ModelConfig,
                      samples: int | None = None, threads: int = 1) -> SweepResult:
    """Train one APP-VAE per latent size and report validation log-likelihood per step."""
    if not sizes:
        raise ValueError("sizes must be non-empty")
    samples = train_config.eval_samples if samples is None else samples
    train_set, val_set = split_dataset(dataset, 1.0 - train_config.val_fraction, train_config.seed)
    rows = []
    for size in sizes:
        cfg = replace(model_config, latent_dim=int(size))
        model, _ = train(train_set, cfg, train_config, validation=val_set)
        report = evaluate(model, val_set, samples, "mode", train_config.seed, threads)
        rows.append((int(size), report.ll_per_step))
    return SweepResult(rows)

"""Loss terms: Gaussian KL, categorical and interval-time likelihoods, ELBO.

Every term accepts Vars (and records on their tape) or plain arrays (and
returns plain values). Losses are negative log-likelihoods, so smaller is
better.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .model import Batch, ForwardTrace, GaussianParams, as_batch
from .nn import Tape, Var


def _lift(*xs):
    tape = next((x.tape for x in xs if isinstance(x, Var)), None)
    plain = tape is None
    if plain:
        tape = Tape(record=False)
    return tape, plain, [x if isinstance(x, Var) else tape.constant(x) for x in xs]


def _out(v: Var, plain: bool):
    if not plain:
        return v
    return float(v.value) if v.value.ndim == 0 else v.value


def kl_diag_gaussians(q: GaussianParams, p: GaussianParams):
    """KL(q || p) between diagonal Gaussians given by mean and log-variance, summed over the last axis."""
    tape, plain, (mq, lq, mp, lp) = _lift(q.mean, q.log_var, p.mean, p.log_var)
    if mq.shape != mp.shape or lq.shape != lp.shape or mq.shape != lq.shape:
        raise ValueError(f"KL: shape mismatch {mq.shape} vs {mp.shape}")
    diff = mp - mq
    terms = nn.exp(tape, lq - lp) + nn.square(diff) * nn.exp(tape, -lp) - 1.0 + lp - lq
    return _out(nn.scale(nn.sum_(tape, terms, axis=-1), 0.5), plain)


def action_nll(action_probs, true_category, log_input: bool = False):
    """Cross-entropy ``-log p[true_category]``.

    Pass log-probabilities with ``log_input=True`` (what the model does);
    plain probabilities are converted through a log-softmax of their logs.
    """
    tape, plain, (x,) = _lift(action_probs)
    logp = x if log_input else nn.log_softmax(tape, _log(tape, x))
    return _out(-nn.pick(tape, logp, true_category), plain)


def _log(tape: Tape, x: Var) -> Var:
    xv = x.value
    with np.errstate(divide="ignore"):
        out = np.log(xv)
    return tape._push(out, (x,), lambda g: (g / xv,))


def time_nll(lam, true_tau, delta_tau: float):
    """Negative log-probability of the interval [tau, tau + delta_tau] under Exponential(lam)."""
    tape, plain, (lam_v, tau_v) = _lift(lam, true_tau)
    ll = nn.log1mexp(tape, nn.scale(lam_v, delta_tau)) - lam_v * tau_v
    return _out(-ll, plain)


def td_lstm_loss(action_probs, tau_hat, true_category, true_tau, log_input: bool = False):
    """Cross-entropy plus squared error on the inter-arrival time."""
    tape, plain, (p, t_hat, t_true) = _lift(action_probs, tau_hat, true_tau)
    logp = p if log_input else nn.log_softmax(tape, _log(tape, p))
    return _out(-nn.pick(tape, logp, true_category) + nn.square(t_hat - t_true), plain)


@dataclass
class LossBreakdown:
    """Sums over all real steps, their per-step arrays, and the training objective.

    ``objective`` is the differentiable quantity that gets minimized: each
    sequence's summed loss divided by its length, averaged over sequences.
    """

    total: float
    action_nll: float
    time_nll: float
    kl: float
    per_step_action: np.ndarray
    per_step_time: np.ndarray
    per_step_kl: np.ndarray
    objective: Var
    num_steps: int

    def per_step_means(self) -> dict:
        n = max(self.num_steps, 1)
        return {
            "total": self.total / n,
            "action_nll": self.action_nll / n,
            "time_nll": self.time_nll / n,
            "kl": self.kl / n,
        }


def _assemble(step_terms: list[Var], batch: Batch, parts: tuple[np.ndarray, np.ndarray, np.ndarray]) -> LossBreakdown:
    tape = step_terms[0].tape
    per_step = step_terms[0]
    for t in step_terms[1:]:
        per_step = per_step + t
    mask = batch.mask
    weights = mask / mask.sum(axis=1, keepdims=True) / mask.shape[0]
    objective = nn.sum_(tape, per_step * weights)
    a, t, k = (p * mask for p in parts)
    return LossBreakdown(
        total=float(a.sum() + t.sum() + k.sum()),
        action_nll=float(a.sum()),
        time_nll=float(t.sum()),
        kl=float(k.sum()),
        per_step_action=a,
        per_step_time=t,
        per_step_kl=k,
        objective=objective,
        num_steps=int(mask.sum()),
    )


def elbo_loss(trace: ForwardTrace, sequence=None, delta_tau: float = 1.0, kl_weight: float = 1.0) -> LossBreakdown:
    """Negative ELBO with a single reparameterized sample per step.

    For traces without a latent (app_lstm) the KL term is identically zero and
    the result is the exact negative log-likelihood. ``kl_weight`` only scales
    the KL inside ``objective``; the reported sums stay unweighted.
    """
    batch = trace.batch
    if sequence is not None and as_batch(sequence).categories.shape != batch.categories.shape:
        raise ValueError("trace and sequence lengths differ")
    if trace.lam is None:
        raise ValueError("elbo_loss needs an intensity output; use td_lstm_loss for td_lstm")
    a = action_nll(trace.action_log_probs, batch.categories, log_input=True)
    t = time_nll(trace.lam, batch.taus, delta_tau)
    terms = [a, t]
    if trace.posterior is not None:
        k = kl_diag_gaussians(trace.posterior, trace.prior)
        terms.append(k if kl_weight == 1.0 else nn.scale(k, kl_weight))
        kv = k.value
    else:
        kv = np.zeros_like(a.value)
    return _assemble(terms, batch, (a.value, t.value, kv))


def td_lstm_batch_loss(trace: ForwardTrace) -> LossBreakdown:
    batch = trace.batch
    a = action_nll(trace.action_log_probs, batch.categories, log_input=True)
    sq = nn.square(trace.tau_hat - batch.taus)
    return _assemble([a, sq], batch, (a.value, sq.value, np.zeros_like(a.value)))


def sequence_loss(trace: ForwardTrace, delta_tau: float, kl_weight: float = 1.0) -> LossBreakdown:
    """Training loss for whichever variant produced ``trace``."""
    if trace.tau_hat is not None:
        return td_lstm_batch_loss(trace)
    return elbo_loss(trace, delta_tau=delta_tau, kl_weight=kl_weight)

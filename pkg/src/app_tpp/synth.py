"""Synthetic marked point processes with known generative structure.

All generators truncate each sequence at a fixed event count and emit
inter-arrival times (the first one measured from t=0). Sequence ``i`` is drawn
from its own stream ``rng.stream(seed, i)``, so output does not depend on
generation order.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import rng
from .events import ActionSequence, Dataset


class SpecError(ValueError):
    pass


def _check_counts(num_sequences: int, events_per_sequence: int) -> None:
    if num_sequences < 1 or events_per_sequence < 1:
        raise SpecError("num_sequences and events_per_sequence must be >= 1")


def _simplex(probs, what: str) -> np.ndarray:
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 1 or np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
        raise SpecError(f"{what} must be a probability vector, got {probs!r}")
    return p


@dataclass(frozen=True)
class PoissonSpec:
    rate: float
    num_categories: int = 1
    category_probs: tuple[float, ...] | None = None

    def __post_init__(self):
        if not self.rate > 0:
            raise SpecError(f"rate must be positive, got {self.rate}")
        if self.num_categories < 1:
            raise SpecError("num_categories must be >= 1")
        if self.category_probs is not None and len(self.category_probs) != self.num_categories:
            raise SpecError("category_probs length must equal num_categories")
        _simplex(self.probs, "category_probs")

    @property
    def probs(self) -> np.ndarray:
        if self.category_probs is None:
            return np.full(self.num_categories, 1.0 / self.num_categories)
        return np.asarray(self.category_probs, dtype=np.float64)


@dataclass(frozen=True)
class HawkesSpec:
    mu: float
    alpha: float
    beta: float
    num_categories: int = 1

    def __post_init__(self):
        if not self.mu > 0 or not self.beta > 0 or self.alpha < 0:
            raise SpecError("need mu > 0, beta > 0, alpha >= 0")
        if not self.alpha < self.beta:
            raise SpecError(f"non-stationary Hawkes process: alpha={self.alpha} >= beta={self.beta}")
        if self.num_categories < 1:
            raise SpecError("num_categories must be >= 1")

    @property
    def stationary_rate(self) -> float:
        return self.mu / (1.0 - self.alpha / self.beta)


@dataclass(frozen=True)
class SelfCorrectingSpec:
    mu: float
    alpha: float
    num_categories: int = 1

    def __post_init__(self):
        if not self.mu > 0 or not self.alpha > 0:
            raise SpecError("self-correcting process needs mu > 0 and alpha > 0")
        if self.num_categories < 1:
            raise SpecError("num_categories must be >= 1")


@dataclass(frozen=True)
class MarkovMarkSpec:
    transition_matrix: tuple[tuple[float, ...], ...]
    per_state_rate: tuple[float, ...]
    initial_probs: tuple[float, ...] | None = field(default=None)

    def __post_init__(self):
        P = np.asarray(self.transition_matrix, dtype=np.float64)
        if P.ndim != 2 or P.shape[0] != P.shape[1]:
            raise SpecError("transition_matrix must be square")
        for i, row in enumerate(P):
            if np.any(row < 0) or abs(row.sum() - 1.0) > 1e-9:
                raise SpecError(f"transition_matrix row {i} is not stochastic: {row.tolist()}")
        rates = np.asarray(self.per_state_rate, dtype=np.float64)
        if rates.shape != (P.shape[0],) or np.any(~(rates > 0)):
            raise SpecError("per_state_rate must hold one positive rate per state")
        if self.initial_probs is not None:
            if len(self.initial_probs) != P.shape[0]:
                raise SpecError("initial_probs length must equal the number of states")
            _simplex(self.initial_probs, "initial_probs")

    @property
    def num_categories(self) -> int:
        return len(self.transition_matrix)

    @classmethod
    def cycle(cls, k: int, rate: float = 1.0) -> "MarkovMarkSpec":
        """Deterministic cycle 0 -> 1 -> ... -> k-1 -> 0."""
        P = np.roll(np.eye(k), 1, axis=1)
        return cls(tuple(map(tuple, P.tolist())), (float(rate),) * k)


def gen_poisson(spec: PoissonSpec, num_sequences: int, events_per_sequence: int, seed: int) -> Dataset:
    _check_counts(num_sequences, events_per_sequence)
    probs = spec.probs
    seqs = []
    for i in range(num_sequences):
        g = rng.stream(seed, i)
        taus = g.exponential(1.0 / spec.rate, size=events_per_sequence)
        marks = g.choice(spec.num_categories, size=events_per_sequence, p=probs)
        seqs.append(ActionSequence.from_arrays(marks, taus))
    return Dataset(tuple(seqs), spec.num_categories, name="poisson")


def hawkes_event_times(spec: HawkesSpec, n: int, g: np.random.Generator) -> np.ndarray:
    """Ogata thinning for ``mu + sum_i alpha * exp(-beta (t - t_i))``.

    Between events the intensity only decays, so its value at the current
    candidate point bounds it until the next accepted event.
    """
    times = np.empty(n)
    t = 0.0
    excitation = 0.0  # sum of alpha * exp(-beta (t - t_i)) at time t
    count = 0
    while count < n:
        bound = spec.mu + excitation
        w = g.exponential(1.0 / bound)
        t += w
        excitation *= math.exp(-spec.beta * w)
        if g.uniform() * bound <= spec.mu + excitation:
            times[count] = t
            count += 1
            excitation += spec.alpha
    return times


def gen_hawkes(spec: HawkesSpec, num_sequences: int, events_per_sequence: int, seed: int) -> Dataset:
    _check_counts(num_sequences, events_per_sequence)
    seqs = []
    for i in range(num_sequences):
        g = rng.stream(seed, i)
        taus = np.diff(hawkes_event_times(spec, events_per_sequence, g), prepend=0.0)
        marks = g.integers(spec.num_categories, size=events_per_sequence)
        seqs.append(ActionSequence.from_arrays(marks, taus))
    return Dataset(tuple(seqs), spec.num_categories, name="hawkes")


def self_correcting_event_times(spec: SelfCorrectingSpec, n: int, g: np.random.Generator) -> np.ndarray:
    """Thinning for ``exp(mu t - alpha N(t))``.

    The intensity grows between events, so candidates are drawn window by
    window with the bound taken at the window's right end.
    """
    window = 1.0 / spec.mu
    times = np.empty(n)
    t = 0.0
    count = 0
    while count < n:
        log_bound = spec.mu * (t + window) - spec.alpha * count
        w = g.exponential(math.exp(-log_bound))
        if w > window:
            t += window
            continue
        t += w
        if g.uniform() <= math.exp(spec.mu * t - spec.alpha * count - log_bound):
            times[count] = t
            count += 1
    return times


def gen_self_correcting(
    spec: SelfCorrectingSpec, num_sequences: int, events_per_sequence: int, seed: int
) -> Dataset:
    _check_counts(num_sequences, events_per_sequence)
    seqs = []
    for i in range(num_sequences):
        g = rng.stream(seed, i)
        taus = np.diff(self_correcting_event_times(spec, events_per_sequence, g), prepend=0.0)
        marks = g.integers(spec.num_categories, size=events_per_sequence)
        seqs.append(ActionSequence.from_arrays(marks, taus))
    return Dataset(tuple(seqs), spec.num_categories, name="self_correcting")


def gen_markov_marks(spec: MarkovMarkSpec, num_sequences: int, events_per_sequence: int, seed: int) -> Dataset:
    _check_counts(num_sequences, events_per_sequence)
    P = np.asarray(spec.transition_matrix, dtype=np.float64)
    cum = np.cumsum(P, axis=1)
    rates = np.asarray(spec.per_state_rate, dtype=np.float64)
    k = spec.num_categories
    init = np.full(k, 1.0 / k) if spec.initial_probs is None else np.asarray(spec.initial_probs)
    seqs = []
    for i in range(num_sequences):
        g = rng.stream(seed, i)
        u = g.uniform(size=events_per_sequence)
        marks = np.empty(events_per_sequence, dtype=np.int64)
        marks[0] = g.choice(k, p=init)
        for n in range(1, events_per_sequence):
            # searchsorted on the cumulative row; min() guards against rounding at 1.0
            marks[n] = min(int(np.searchsorted(cum[marks[n - 1]], u[n], side="right")), k - 1)
        taus = g.exponential(1.0 / rates[marks])
        seqs.append(ActionSequence.from_arrays(marks, taus))
    return Dataset(tuple(seqs), k, name="markov")

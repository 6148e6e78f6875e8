"""Marked event sequences: data model, text format and train/validation splits.

File format (line-delimited text)::

    # comment lines start with '#'
    K=3
    0:1.5 2:0.25
    1:0.0 1:3.75 0:0.125

The first non-comment line declares the number of categories. Every following
non-empty line is one sequence of ``<category_id>:<inter_arrival>`` tokens.
The first inter-arrival of a sequence is measured from the sequence start.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, TextIO

import numpy as np


class DataError(ValueError):
    """Raised for malformed or invalid event data."""


@dataclass(frozen=True)
class ActionEvent:
    category_id: int
    inter_arrival: float

    def __post_init__(self):
        if self.category_id < 0:
            raise DataError(f"negative category id {self.category_id}")
        if not math.isfinite(self.inter_arrival) or self.inter_arrival < 0:
            raise DataError(f"inter_arrival must be finite and >= 0, got {self.inter_arrival}")


@dataclass(frozen=True)
class ActionSequence:
    events: tuple[ActionEvent, ...]

    def __post_init__(self):
        if len(self.events) == 0:
            raise DataError("a sequence needs at least one event")

    def __len__(self) -> int:
        return len(self.events)

    def __iter__(self):
        return iter(self.events)

    def __getitem__(self, n):
        return self.events[n]

    @property
    def categories(self) -> np.ndarray:
        return np.array([e.category_id for e in self.events], dtype=np.int64)

    @property
    def inter_arrivals(self) -> np.ndarray:
        return np.array([e.inter_arrival for e in self.events], dtype=np.float64)

    @classmethod
    def from_arrays(cls, categories, inter_arrivals) -> "ActionSequence":
        return cls(tuple(ActionEvent(int(a), float(t)) for a, t in zip(categories, inter_arrivals)))


@dataclass(frozen=True)
class Dataset:
    sequences: tuple[ActionSequence, ...]
    num_categories: int
    name: str = field(default="", compare=False)

    def __post_init__(self):
        if self.num_categories < 1:
            raise DataError(f"num_categories must be positive, got {self.num_categories}")
        if len(self.sequences) == 0:
            raise DataError("no sequences")
        for i, seq in enumerate(self.sequences):
            for e in seq:
                if e.category_id >= self.num_categories:
                    raise DataError(
                        f"sequence {i}: category {e.category_id} out of range for K={self.num_categories}"
                    )

    def __len__(self) -> int:
        return len(self.sequences)

    def __iter__(self):
        return iter(self.sequences)

    def __getitem__(self, i):
        return self.sequences[i]

    def subset(self, indices: Iterable[int], name: str | None = None) -> "Dataset":
        return Dataset(
            tuple(self.sequences[i] for i in indices),
            self.num_categories,
            self.name if name is None else name,
        )

    @property
    def num_events(self) -> int:
        return sum(len(s) for s in self.sequences)


def _parse_token(token: str, lineno: int, num_categories: int) -> ActionEvent:
    cat, sep, tau = token.partition(":")
    if not sep:
        raise DataError(f"line {lineno}: malformed token {token!r}, expected <category>:<time>")
    try:
        category_id = int(cat)
        inter_arrival = float(tau)
    except ValueError:
        raise DataError(f"line {lineno}: malformed token {token!r}") from None
    if category_id < 0 or category_id >= num_categories:
        raise DataError(f"line {lineno}: category {category_id} out of range for K={num_categories}")
    if not math.isfinite(inter_arrival):
        raise DataError(f"line {lineno}: non-finite inter-arrival in {token!r}")
    if inter_arrival < 0:
        raise DataError(f"line {lineno}: negative inter-arrival {inter_arrival!r}")
    return ActionEvent(category_id, inter_arrival)


def parse_dataset(stream: TextIO | str, name: str = "", time_scale: float = 1.0) -> Dataset:
    """Read a dataset from a text stream (or a string holding the file body).

    ``time_scale`` multiplies every inter-arrival on load.
    """
    if isinstance(stream, str):
        lines = stream.splitlines()
    else:
        lines = stream.read().splitlines()
    if not time_scale > 0:
        raise DataError(f"time_scale must be positive, got {time_scale}")

    num_categories = None
    sequences = []
    for lineno, raw in enumerate(lines, start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if num_categories is None:
            key, sep, value = line.partition("=")
            if not sep or key.strip() != "K":
                raise DataError(f"line {lineno}: expected header 'K=<int>', got {line!r}")
            try:
                num_categories = int(value)
            except ValueError:
                raise DataError(f"line {lineno}: bad category count {value!r}") from None
            if num_categories < 1:
                raise DataError(f"line {lineno}: category count must be positive")
            continue
        events = [_parse_token(tok, lineno, num_categories) for tok in line.split()]
        if time_scale != 1.0:
            events = [ActionEvent(e.category_id, e.inter_arrival * time_scale) for e in events]
        sequences.append(ActionSequence(tuple(events)))

    if num_categories is None:
        raise DataError("missing 'K=<int>' header")
    if not sequences:
        raise DataError("no sequences")
    return Dataset(tuple(sequences), num_categories, name)


def write_dataset(dataset: Dataset) -> str:
    # repr() of a float is the shortest string that round-trips exactly
    lines = [f"K={dataset.num_categories}"]
    for seq in dataset:
        lines.append(" ".join(f"{e.category_id}:{float(e.inter_arrival)!r}" for e in seq))
    return "\n".join(lines) + "\n"


def load_dataset(path, time_scale: float = 1.0) -> Dataset:
    with open(path, "r", encoding="latin-1") as fh:
        return parse_dataset(fh, name=str(path), time_scale=time_scale)


def train_size(n: int, train_fraction: float) -> int:
    # round first so 0.7 * 10 = 7.000000000000001 does not ceil to 8
    return math.ceil(round(train_fraction * n, 9))


def split_dataset(dataset: Dataset, train_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Shuffle deterministically and split into (train, validation).

    The train share gets ``ceil(train_fraction * N)`` sequences.
    """
    if not 0 < train_fraction < 1:
        raise ValueError(f"train_fraction must be in (0, 1), got {train_fraction}")
    n = len(dataset)
    if n < 2:
        raise DataError("need at least 2 sequences to split")
    k = min(max(train_size(n, train_fraction), 1), n - 1)
    order = np.random.Generator(np.random.Philox(seed)).permutation(n)
    return (
        dataset.subset(order[:k].tolist(), name=f"{dataset.name}:train"),
        dataset.subset(order[k:].tolist(), name=f"{dataset.name}:val"),
    )

"""Mini-batch training with validation-based model selection."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass

import numpy as np

from . import nn, rng
from .events import Dataset, split_dataset
from .model import APPModel, Batch, ModelConfig, forward_teacher_forced
from .nn import NumericalError, Tape
from .objective import LossBreakdown, sequence_loss

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 1500
    batch_size: int = 32
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    grad_clip: float = 5.0
    seed: int = 0
    val_fraction: float = 0.3
    eval_samples: int = 1500
    kl_weight: float = 1.0

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.eval_samples < 1:
            raise ValueError("epochs must be >= 0, batch_size and eval_samples >= 1")
        if not 0 < self.val_fraction < 1:
            raise ValueError(f"val_fraction must be in (0, 1), got {self.val_fraction}")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")


def batch_loss(model: APPModel, tape: Tape, batch: Batch, noise_seed: int, noise_key: int,
               kl_weight: float = 1.0) -> LossBreakdown:
    """Forward the batch with posterior sampling and return its loss breakdown."""
    c = model.config
    noise = None
    if c.has_latent:
        noise = rng.stream(noise_seed, noise_key).standard_normal((*batch.categories.shape, c.latent_dim))
    trace = forward_teacher_forced(model.bind(tape), batch, noise, use_posterior_sampling=True)
    return sequence_loss(trace, c.delta_tau, kl_weight)


def _batches(n: int, batch_size: int, g: np.random.Generator) -> list[np.ndarray]:
    order = g.permutation(n)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


def evaluate_loss(model: APPModel, dataset: Dataset, seed: int, batch_size: int = 256) -> dict:
    """Per-step mean loss terms over a dataset, with fixed noise so repeated calls agree."""
    sums = {"total": 0.0, "action_nll": 0.0, "time_nll": 0.0, "kl": 0.0}
    objective = 0.0
    steps = 0
    seqs = dataset.sequences
    for start in range(0, len(seqs), batch_size):
        chunk = seqs[start : start + batch_size]
        loss = batch_loss(model, Tape(record=False), Batch.from_sequences(chunk), seed, start)
        sums["total"] += loss.total
        sums["action_nll"] += loss.action_nll
        sums["time_nll"] += loss.time_nll
        sums["kl"] += loss.kl
        objective += float(loss.objective.value) * len(chunk)
        steps += loss.num_steps
    out = {k: v / steps for k, v in sums.items()}
    out["objective"] = objective / len(seqs)
    return out


def train(
    dataset: Dataset,
    model_config: ModelConfig,
    train_config: TrainConfig,
    validation: Dataset | None = None,
    callback=None,
) -> tuple[APPModel, list[dict]]:
    """Train a model and return the parameters from the epoch with the lowest validation loss.

    Without an explicit ``validation`` set the dataset is split with
    ``val_fraction`` held out. Epoch 0 in the log is the untrained model.
    """
    if dataset.num_categories != model_config.num_categories:
        raise ValueError(
            f"dataset has K={dataset.num_categories}, model expects K={model_config.num_categories}"
        )
    if validation is None:
        train_set, val_set = split_dataset(dataset, 1.0 - train_config.val_fraction, train_config.seed)
    else:
        train_set, val_set = dataset, validation

    tc = train_config
    model = APPModel.create(model_config, seed=tc.seed)
    store = model.store
    shuffle = rng.stream(tc.seed, 0x5F)
    val_seed = int(rng.stream(tc.seed, 0xA1).integers(2**62))
    noise_seed = int(rng.stream(tc.seed, 0x0B).integers(2**62))

    val = evaluate_loss(model, val_set, val_seed)
    best = (val["objective"], 0, store.snapshot())
    history = [{"epoch": 0, "train": None, "val": val}]
    log.info("epoch 0 val %.6f", val["objective"])

    step = 0
    for epoch in range(1, tc.epochs + 1):
        sums = {"total": 0.0, "action_nll": 0.0, "time_nll": 0.0, "kl": 0.0}
        steps = 0
        for b, idx in enumerate(_batches(len(train_set), tc.batch_size, shuffle)):
            batch = Batch.from_sequences([train_set.sequences[i] for i in idx])
            store.zero_grad()
            tape = Tape()
            loss = batch_loss(model, tape, batch, noise_seed, step, tc.kl_weight)
            if not math.isfinite(float(loss.objective.value)):
                raise NumericalError(f"non-finite loss at epoch {epoch}, batch {b} (sequences {idx.tolist()})")
            tape.backward(loss.objective)
            nn.clip_grad_norm(store, tc.grad_clip)
            nn.adam_step(store, tc.learning_rate, tc.beta1, tc.beta2, tc.adam_eps)
            step += 1
            sums["total"] += loss.total
            sums["action_nll"] += loss.action_nll
            sums["time_nll"] += loss.time_nll
            sums["kl"] += loss.kl
            steps += loss.num_steps
        val = evaluate_loss(model, val_set, val_seed)
        if not math.isfinite(val["objective"]):
            raise NumericalError(f"non-finite validation loss at epoch {epoch}")
        record = {"epoch": epoch, "train": {k: v / steps for k, v in sums.items()}, "val": val}
        history.append(record)
        if val["objective"] < best[0]:
            best = (val["objective"], epoch, store.snapshot())
        if callback is not None:
            callback(record)
        log.debug("epoch %d train %.6f val %.6f", epoch, record["train"]["total"], val["objective"])

    store.load(best[2])
    history.append({"selected_epoch": best[1], "best_val_objective": best[0]})
    return model, history


def format_log(history: list[dict]) -> str:
    """Line-delimited JSON, one record per epoch."""
    return "".join(json.dumps(r, sort_keys=True) + "\n" for r in history)


def config_echo(model_config: ModelConfig, train_config: TrainConfig) -> dict:
    return {"model": model_config.to_dict(), "train": asdict(train_config)}

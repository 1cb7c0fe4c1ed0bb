"""Adam with inverse-sqrt scheduling, early stopping, pretrain / fine-tune loops."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .data import Corpus, batch_iterator
from .model import ModelConfig, ModelParams, batch_log_probs, init_params
from .objectives import LossConfig, batch_mixed_loss, oversmoothing_rate

log = logging.getLogger(__name__)

IMPROVEMENT = 1e-6
LOG_COLUMNS = ("updates", "dev_objective", "dev_ppl", "dev_os_rate", "lr", "seconds")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 5e-4
    warmup: int = 400
    beta1: float = 0.9
    beta2: float = 0.98
    adam_eps: float = 1e-8
    weight_decay: float = 1e-4
    dropout: float = 0.3
    label_smoothing: float = 0.1
    margin: float = 1e-4
    batch_size: int = 32
    valid_every: int = 200
    patience: int = 5
    max_updates: int = 10_000
    seed: int = 0
    # wall-clock timings go in the log unless disabled (needed for byte-identical logs)
    record_time: bool = True

    def __post_init__(self):
        if self.warmup < 1 or self.patience < 1 or self.valid_every < 1 or self.batch_size < 1:
            raise ValueError("warmup, patience, valid_every and batch_size must be >= 1")
        if min(self.lr, self.weight_decay, self.dropout, self.label_smoothing, self.margin) < 0:
            raise ValueError("rates must be non-negative")


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, arrays: dict[str, np.ndarray]) -> "OptimizerState":
        return cls({k: np.zeros_like(a) for k, a in arrays.items()},
                   {k: np.zeros_like(a) for k, a in arrays.items()})


@dataclass
class ValidationRecord:
    updates: int
    dev_objective: float
    dev_ppl: float
    dev_os_rate: float
    lr: float
    seconds: float


@dataclass
class TrainLog:
    records: list[ValidationRecord] = field(default_factory=list)
    stopped_early: bool = False
    best_updates: int = 0

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(LOG_COLUMNS)
            for r in self.records:
                w.writerow([r.updates, repr(r.dev_objective), repr(r.dev_ppl), repr(r.dev_os_rate),
                            repr(r.lr), f"{r.seconds:.3f}"])

    @classmethod
    def read_csv(cls, path: str | Path) -> "TrainLog":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        return cls([ValidationRecord(int(r["updates"]), float(r["dev_objective"]), float(r["dev_ppl"]),
                                     float(r["dev_os_rate"]), float(r["lr"]), float(r["seconds"]))
                    for r in rows])


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss or gradient; ``checkpoint`` is the last good model."""

    def __init__(self, msg: str, checkpoint: ModelParams | None = None, log: TrainLog | None = None):
        super().__init__(msg)
        self.checkpoint = checkpoint
        self.log = log


def lr_at(step: int, config: TrainConfig) -> float:
    if step < 1:
        raise ValueError("step must be >= 1")
    w = config.warmup
    return config.lr * min(step / w, math.sqrt(w / step))


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
              state: OptimizerState, config: TrainConfig,
              lr: float | None = None) -> tuple[dict[str, np.ndarray], OptimizerState]:
    """Bias-corrected Adam with decoupled weight decay; inputs are not mutated.

    Parameters without a gradient entry are treated as having zero gradient.
    """
    for k, g in grads.items():
        if k not in params:
            raise KeyError(f"gradient for unknown parameter {k!r}")
        if g.shape != params[k].shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {params[k].shape} for {k!r}")
        if not np.all(np.isfinite(g)):
            bad = int(np.sum(~np.isfinite(g)))
            raise FloatingPointError(f"non-finite gradient for {k!r} ({bad} entries) at step {state.step + 1}")
    step = state.step + 1
    lr = lr_at(step, config) if lr is None else lr
    b1, b2 = config.beta1, config.beta2
    c1 = 1.0 - b1 ** step
    c2 = 1.0 - b2 ** step
    new_p, new_m, new_v = {}, {}, {}
    for k, p in params.items():
        g = grads.get(k)
        if g is None:
            m = state.m[k] * b1
            v = state.v[k] * b2
        else:
            m = b1 * state.m[k] + (1.0 - b1) * g
            v = b2 * state.v[k] + (1.0 - b2) * g * g
        p = p - lr * config.weight_decay * p if config.weight_decay else p
        new_p[k] = p - lr * (m / c1) / (np.sqrt(v / c2) + config.adam_eps)
        new_m[k], new_v[k] = m, v
    return new_p, OptimizerState(new_m, new_v, step)


class EarlyStopper:
    """Stops after ``patience`` consecutive validations without strict improvement."""

    def __init__(self, patience: int, tol: float = IMPROVEMENT):
        self.patience = patience
        self.tol = tol
        self.best = math.inf
        self.bad = 0

    def update(self, value: float) -> tuple[bool, bool]:
        """Returns (improved, should_stop)."""
        if value < self.best - self.tol:
            self.best = value
            self.bad = 0
            return True, False
        self.bad += 1
        return False, self.bad >= self.patience


def evaluate_objective(params: ModelParams, corpus: Corpus, loss: LossConfig,
                       batch_size: int = 100) -> tuple[float, float, float]:
    """Dev metrics without dropout: (mean per-sentence objective, perplexity, mean os rate)."""
    total_obj, total_lp, n_tok, rates = 0.0, 0.0, 0, []
    pairs = corpus.pairs
    for start in range(0, len(pairs), batch_size):
        chunk = pairs[start:start + batch_size]
        logp, tgt, lengths = batch_log_probs(params, [p[0] for p in chunk], [p[1] for p in chunk])
        total_obj += batch_mixed_loss(logp, tgt, lengths, loss).item() * len(chunk)
        arr = logp.data
        for i, T in enumerate(lengths):
            slp = arr[i, :T]
            target = tgt[i, :T]
            total_lp += float(slp[np.arange(T), target].sum())
            n_tok += int(T)
            rep = oversmoothing_rate(slp, target)
            if not rep.degenerate:
                rates.append(rep.rate)
    return (total_obj / len(pairs), math.exp(-total_lp / n_tok),
            float(np.mean(rates)) if rates else 0.0)


def _fit(params: ModelParams, train: Corpus, dev: Corpus, loss: LossConfig,
         config: TrainConfig) -> tuple[ModelParams, TrainLog]:
    arrays = params.arrays()
    state = OptimizerState.zeros_like(arrays)
    if config.dropout != params.config.dropout_rate:
        params = ModelParams(replace(params.config, dropout_rate=config.dropout), params.tensors,
                             params.update_count, params.alpha)
    base_updates = params.update_count
    drop_rng = np.random.default_rng([config.seed, 7919])
    stopper = EarlyStopper(config.patience)
    tlog = TrainLog()
    best = params
    t0 = time.perf_counter()

    epoch = 0
    current = params
    while state.step < config.max_updates:
        for batch in batch_iterator(train, config.batch_size, config.seed, epoch):
            tape = ad.Tape()
            with tape:
                logp, tgt, lengths = batch_log_probs(current, [p[0] for p in batch],
                                                     [p[1] for p in batch], rng=drop_rng)
                obj = batch_mixed_loss(logp, tgt, lengths, loss)
            value = obj.item()
            if not math.isfinite(value):
                raise DivergenceError(f"non-finite loss at update {state.step + 1}", best, tlog)
            grads = ad.backward(tape, obj)
            try:
                arrays, state = adam_step(arrays, grads, state, config)
            except FloatingPointError as exc:
                raise DivergenceError(str(exc), best, tlog) from exc
            current = current.with_arrays(arrays, update_count=base_updates + state.step, alpha=loss.alpha)

            if state.step % config.valid_every == 0 or state.step == config.max_updates:
                dev_obj, dev_ppl, dev_rate = evaluate_objective(current, dev, loss)
                if not math.isfinite(dev_obj):
                    raise DivergenceError(f"non-finite dev objective at update {state.step}", best, tlog)
                secs = time.perf_counter() - t0 if config.record_time else 0.0
                tlog.records.append(ValidationRecord(state.step, dev_obj, dev_ppl, dev_rate,
                                                     lr_at(state.step, config), secs))
                improved, stop = stopper.update(dev_obj)
                log.info("update %d dev_obj %.4f ppl %.3f os_rate %.3f%s", state.step, dev_obj,
                         dev_ppl, dev_rate, " *" if improved else "")
                if improved:
                    best = current
                    tlog.best_updates = state.step
                if stop:
                    tlog.stopped_early = True
                    return _restore_dropout(best, params), tlog
            if state.step >= config.max_updates:
                break
        epoch += 1
    return _restore_dropout(best, params), tlog


def _restore_dropout(best: ModelParams, ref: ModelParams) -> ModelParams:
    return ModelParams(ref.config, best.tensors, best.update_count, best.alpha)


def pretrain(model_config: ModelConfig, train: Corpus, dev: Corpus,
             config: TrainConfig) -> tuple[ModelParams, TrainLog]:
    """Label-smoothed NLL training from fresh parameters; returns the best-dev model."""
    params = init_params(model_config)
    loss = LossConfig(alpha=0.0, margin=config.margin, label_smoothing=config.label_smoothing)
    return _fit(params, train, dev, loss, config)


def finetune(checkpoint: ModelParams, train: Corpus, dev: Corpus, config: TrainConfig,
             alpha: float) -> tuple[ModelParams, TrainLog]:
    """Continue from ``checkpoint`` with the alpha-mixed objective and no label smoothing."""
    loss = LossConfig(alpha=alpha, margin=config.margin, label_smoothing=0.0)
    start = ModelParams(checkpoint.config, checkpoint.tensors, checkpoint.update_count, alpha)
    best, tlog = _fit(start, train, dev, loss, config)
    return ModelParams(best.config, best.tensors, best.update_count, alpha), tlog

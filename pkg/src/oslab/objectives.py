"""Sequence losses and oversmoothing diagnostics.

All functions take a teacher-forced ``slp`` matrix (T x V, row t holding
log p(. | y_<t)) and the gold target whose last token is ``<eos>``.  The
losses accept a :class:`Tensor` (differentiable) or a plain array; the
diagnostics work on arrays.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .vocab import EOS


@dataclass
class LossConfig:
    alpha: float = 0.0
    margin: float = 1e-4
    label_smoothing: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.alpha < 1.0:
            raise ValueError(f"alpha must lie in [0, 1), got {self.alpha}")
        if self.margin < 0:
            raise ValueError("margin must be >= 0")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ValueError("label_smoothing must lie in [0, 1)")
        # smoothing is switched off once the oversmoothing term is in play
        if self.alpha > 0:
            self.label_smoothing = 0.0


@dataclass
class OversmoothingReport:
    rate: float
    violations: np.ndarray
    mean_eos_logprob: float = math.nan
    mean_eos_rank: float = math.nan
    degenerate: bool = False


def _array(slp) -> np.ndarray:
    return slp.data if isinstance(slp, Tensor) else np.asarray(slp, dtype=np.float64)


def _check(slp, target) -> tuple[int, int]:
    shape = slp.shape
    if len(shape) != 2:
        raise ValueError(f"step log-probs must be T x V, got shape {shape}")
    if len(target) != shape[0]:
        raise ValueError(f"target length {len(target)} != number of steps {shape[0]}")
    return shape


def _onehot(target, V: int) -> np.ndarray:
    oh = np.zeros((len(target), V))
    oh[np.arange(len(target)), np.asarray(target)] = 1.0
    return oh


def nll_loss(slp, target: Sequence[int], epsilon: float = 0.0) -> Tensor:
    """Sequence-summed (label-smoothed) negative log-likelihood."""
    T, V = _check(slp, target)
    if not 0.0 <= epsilon < 1.0:
        raise ValueError("epsilon must lie in [0, 1)")
    weights = _onehot(target, V)
    if epsilon > 0:
        weights = (1.0 - epsilon) * weights + epsilon / V
    return ad.scale(ad.reduce_sum(ad.mul(slp, weights)), -1.0)


def suffix_log_probs(slp, target: Sequence[int]) -> np.ndarray:
    """Entry t: log-probability of the gold suffix y_t..y_T given y_<t."""
    _check(slp, target)
    arr = _array(slp)
    gold = arr[np.arange(len(target)), np.asarray(target)]
    return np.cumsum(gold[::-1])[::-1]


def oversmoothing_rate(slp, target: Sequence[int]) -> OversmoothingReport:
    """Fraction of premature positions whose <eos> outscores the gold suffix."""
    T, V = _check(slp, target)
    if T < 2:
        return OversmoothingReport(0.0, np.zeros(0, dtype=bool), degenerate=True)
    arr = _array(slp)
    suffix = suffix_log_probs(arr, target)
    violations = suffix[:-1] < arr[:-1, EOS]
    logp, rank = eos_prefix_stats(arr, target)
    return OversmoothingReport(float(violations.mean()), violations, logp, rank)


def oversmoothing_loss(slp, target: Sequence[int], m: float) -> Tensor:
    """Hinge upper bound on the oversmoothing rate (for m >= 1), averaged over all T steps."""
    T, V = _check(slp, target)
    if m < 0:
        raise ValueError("margin must be >= 0")
    gold = ad.reduce_sum(ad.mul(slp, _onehot(target, V)), axis=1)
    upper = np.triu(np.ones((T, T)))  # row t sums gold[t:]
    suffix = ad.matmul(upper, ad.reshape(gold, (T, 1)))
    eos = ad.slice_(slp, (slice(None), slice(EOS, EOS + 1)))
    terms = ad.relu(ad.add(ad.sub(eos, suffix), np.full((T, 1), float(m))))
    return ad.reduce_mean(terms)


def mixed_loss(slp, target: Sequence[int], config: LossConfig) -> Tensor:
    """(1 - alpha) * nll + alpha * oversmoothing loss."""
    if not 0.0 <= config.alpha < 1.0:
        raise ValueError(f"alpha must lie in [0, 1), got {config.alpha}")
    nll = nll_loss(slp, target, config.label_smoothing)
    if config.alpha == 0.0:
        return nll
    os_ = oversmoothing_loss(slp, target, config.margin)
    return ad.add(ad.scale(nll, 1.0 - config.alpha), ad.scale(os_, config.alpha))


def batch_mixed_loss(logp: Tensor, targets: np.ndarray, lengths: np.ndarray,
                     config: LossConfig) -> Tensor:
    """Mean over the batch of :func:`mixed_loss`, computed on padded B x T x V log-probs.

    Padded positions carry zero weight, so they receive no gradient.
    """
    B, T, V = logp.shape
    valid = (np.arange(T)[None, :] < lengths[:, None]).astype(np.float64)
    onehot = np.zeros((B, T, V))
    bi, ti = np.nonzero(valid)
    onehot[bi, ti, targets[bi, ti]] = 1.0

    eps = config.label_smoothing
    weights = onehot if eps == 0 else (1.0 - eps) * onehot + (eps / V) * valid[:, :, None]
    nll = ad.scale(ad.reduce_sum(ad.mul(logp, weights)), -1.0 / B)
    if config.alpha == 0.0:
        return nll

    gold = ad.reduce_sum(ad.mul(logp, onehot), axis=2)  # B x T, zero at padding
    suffix = ad.matmul(gold, np.tril(np.ones((T, T))))  # [b, t] = sum_{t' >= t} gold[b, t']
    eos = ad.reshape(ad.slice_(logp, (slice(None), slice(None), slice(EOS, EOS + 1))), (B, T))
    hinge = ad.relu(ad.add(ad.sub(eos, suffix), np.full((B, T), float(config.margin))))
    per_pos = valid / lengths[:, None] / B
    os_ = ad.reduce_sum(ad.mul(hinge, per_pos))
    return ad.add(ad.scale(nll, 1.0 - config.alpha), ad.scale(os_, config.alpha))


def eos_rank(row: np.ndarray) -> int:
    """1-based rank of <eos> in descending order; ties go to the smaller index."""
    v = row[EOS]
    return int(np.sum(row > v) + np.sum(row[:EOS] == v) + 1)


def eos_prefix_stats(slp, target: Sequence[int]) -> tuple[float, float]:
    """Mean <eos> log-prob and mean normalized <eos> rank over premature positions.

    Returns (nan, nan) when the target has no premature position (T < 2).
    """
    T, V = _check(slp, target)
    if T < 2:
        return math.nan, math.nan
    arr = _array(slp)[:-1]
    ranks = [eos_rank(row) / V for row in arr]
    return float(arr[:, EOS].mean()), float(np.mean(ranks))


def perplexity(corpus_slp: Iterable[tuple[object, Sequence[int]]]) -> float:
    """Token-level perplexity of gold targets, <eos> included, no smoothing."""
    total, count = 0.0, 0
    for slp, target in corpus_slp:
        _check(slp, target)
        arr = _array(slp)
        total += float(arr[np.arange(len(target)), np.asarray(target)].sum())
        count += len(target)
    if count == 0:
        raise ValueError("perplexity of an empty corpus")
    return math.exp(-total / count)

"""Beam search without length normalization, and an exhaustive MAP oracle.

Any object with ``start(source)``, ``initial(context)``, ``step(context,
states, prev_tokens)`` and ``select(states, rows)`` can be decoded;
:class:`~oslab.model.ModelParams` and :class:`TableModel` both qualify.

Length convention: ``max_len`` counts every token including the final
``<eos>``.  At step ``max_len`` only ``<eos>`` may be emitted, and
hypotheses finished that way are flagged ``forced``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .vocab import BOS, EOS, PAD

SEARCH_GUARD = 10**6


@dataclass(frozen=True)
class DecodeConfig:
    beam_width: int = 5
    slope: float = 1.2
    offset: int = 10

    def __post_init__(self):
        if self.beam_width < 1:
            raise ValueError("beam_width must be >= 1")
        if self.slope <= 0 or self.offset < 0:
            raise ValueError("need slope > 0 and offset >= 0")

    def max_len(self, source_len: int) -> int:
        """Length cap for a source with ``source_len`` content tokens."""
        return int(math.floor(self.slope * source_len + 1e-9)) + self.offset


@dataclass
class Hypothesis:
    tokens: tuple[int, ...]
    score: float
    finished: bool = True
    forced: bool = False

    def __len__(self) -> int:
        return len(self.tokens)


def _source_len(source: Sequence[int]) -> int:
    return len(source) - 1 if len(source) and source[-1] == EOS else len(source)


def _rank_key(h: Hypothesis):
    return (-h.score, h.tokens)


def beam_search(model, source: Sequence[int], config: DecodeConfig,
                max_len: int | None = None) -> list[Hypothesis]:
    """Finished hypotheses sorted by raw cumulative log-prob (ties: token ids)."""
    if len(source) == 0:
        raise ValueError("empty source")
    k = config.beam_width
    limit = config.max_len(_source_len(source)) if max_len is None else max_len
    if limit < 1:
        raise ValueError("max_len must be >= 1")
    ctx = model.start(source)
    states = model.initial(ctx)
    prefixes: list[tuple[int, ...]] = [()]
    scores = np.zeros(1)
    prev = np.array([BOS])
    finished: list[Hypothesis] = []

    for t in range(1, limit + 1):
        logp, new_states = model.step(ctx, states, prev)
        logp = np.array(logp, dtype=np.float64).reshape(len(prefixes), -1)
        V = logp.shape[1]
        cand = scores[:, None] + logp
        cand[:, PAD] = -np.inf
        cand[:, BOS] = -np.inf
        if t == limit:
            for i, p in enumerate(prefixes):
                finished.append(Hypothesis(p + (EOS,), float(cand[i, EOS]), True, True))
            break

        # parents are all the same length, so lexicographic order on full
        # sequences is (parent order, token id)
        parent_lex = np.empty(len(prefixes), dtype=np.int64)
        parent_lex[sorted(range(len(prefixes)), key=lambda i: prefixes[i])] = np.arange(len(prefixes))
        flat = cand.reshape(-1)
        rows = np.repeat(np.arange(len(prefixes)), V)
        toks = np.tile(np.arange(V), len(prefixes))
        finite = np.isfinite(flat)
        idx = np.nonzero(finite)[0]
        order = np.lexsort((toks[idx], parent_lex[rows[idx]], -flat[idx]))
        chosen = idx[order[:k]]

        keep_rows, keep_prefixes, keep_scores, keep_tokens = [], [], [], []
        for c in chosen:
            r, tok, s = int(rows[c]), int(toks[c]), float(flat[c])
            if tok == EOS:
                finished.append(Hypothesis(prefixes[r] + (EOS,), s))
            else:
                keep_rows.append(r)
                keep_prefixes.append(prefixes[r] + (tok,))
                keep_scores.append(s)
                keep_tokens.append(tok)
        if not keep_rows:
            break
        states = model.select(new_states, np.array(keep_rows))
        prefixes = keep_prefixes
        scores = np.array(keep_scores)
        prev = np.array(keep_tokens)
        # scores only fall as hypotheses grow, so nothing left can beat the
        # current k-th finished hypothesis
        if len(finished) >= k:
            kth = sorted(finished, key=_rank_key)[k - 1].score
            if scores.max() <= kth:
                break
    return sorted(finished, key=_rank_key)


def exhaustive_map(model, source: Sequence[int], max_len: int) -> Hypothesis:
    """Exact argmax over every <eos>-terminated sequence of length <= max_len.

    Uses the same masking and length convention as :func:`beam_search`.
    """
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    ctx = model.start(source)
    states = model.initial(ctx)
    first, _ = model.step(ctx, states, np.array([BOS]))
    V = np.asarray(first).reshape(1, -1).shape[1]
    branching = V - 3  # content tokens plus unk; eos ends a branch
    count = sum(branching ** j for j in range(max_len))
    if count > SEARCH_GUARD:
        raise ValueError(f"exhaustive search over {count} sequences exceeds the guard of "
                         f"{SEARCH_GUARD}; use a smaller vocabulary or max_len")

    best: Hypothesis | None = None
    frontier = [((), 0.0, states, BOS)]
    for t in range(1, max_len + 1):
        nxt = []
        for prefix, score, st, prev in frontier:
            logp, new_st = model.step(ctx, st, np.array([prev]))
            row = np.asarray(logp, dtype=np.float64).reshape(-1)
            cands = [Hypothesis(prefix + (EOS,), score + float(row[EOS]), True, t == max_len)]
            if t < max_len:
                for tok in range(V):
                    if tok in (PAD, BOS, EOS):
                        continue
                    nxt.append((prefix + (tok,), score + float(row[tok]), new_st, tok))
            for h in cands:
                if best is None or _rank_key(h) < _rank_key(best):
                    best = h
        frontier = nxt
    return best


class TableModel:
    """Context-free scorer defined by a function of (source, prefix).

    ``fn(source, prefix)`` returns a length-V probability (or, with
    ``log=True``, log-probability) vector for the next token.
    """

    def __init__(self, fn: Callable[[tuple, tuple], Sequence[float]], vocab_size: int, log: bool = False):
        self.fn = fn
        self.V = vocab_size
        self.log = log

    def _row(self, source, prefix) -> np.ndarray:
        row = np.asarray(self.fn(source, prefix), dtype=np.float64)
        if row.shape != (self.V,):
            raise ValueError(f"table row has shape {row.shape}, expected ({self.V},)")
        if self.log:
            return row
        with np.errstate(divide="ignore"):
            return np.log(row)

    def start(self, source):
        return tuple(source)

    def initial(self, context):
        return [()]

    def step(self, context, states, prev_tokens):
        prev_tokens = np.atleast_1d(prev_tokens)
        new_states = []
        for st, prev in zip(states, prev_tokens):
            new_states.append(st if prev == BOS else st + (int(prev),))
        return np.stack([self._row(context, s) for s in new_states]), new_states

    def select(self, states, rows):
        return [states[i] for i in rows]

    def teacher_forced(self, source, target) -> np.ndarray:
        target = tuple(target)
        return np.stack([self._row(tuple(source), target[:t]) for t in range(len(target))])


def write_decoded(path, sources: Sequence[Sequence[int]], hyps: Sequence[Hypothesis], vocab) -> None:
    """One line per source: source length, tokens, log-prob (9 dp), forced flag."""
    with open(path, "w", encoding="utf-8") as fh:
        for src, h in zip(sources, hyps):
            text = " ".join(vocab.decode(h.tokens))
            fh.write(f"{_source_len(src)}\t{text}\t{h.score:.9f}\t{int(h.forced)}\n")


def read_decoded(path, vocab) -> list[tuple[int, tuple[int, ...], float, bool]]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.rstrip("\n").split("\t")
            if len(parts) != 4:
                raise ValueError(f"{path}:{lineno}: expected 4 tab-separated fields")
            toks = tuple(vocab.encode(parts[1].split())) + (EOS,)
            out.append((int(parts[0]), toks, float(parts[2]), parts[3] == "1"))
    return out

"""Synthetic translation corpora with planted premature-<eos> noise.

A source sentence is a run of uniform random content tokens.  Its clean
target maps each token through a fixed random bijection (optionally swapping
in one of a few fixed alternative images, which makes the task ambiguous the
way real translation is), then appends 0-2 extra mapped tokens.  With
probability ``rho`` a *train* target is cut at a uniform interior position
and re-terminated with <eos>.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .vocab import EOS, Vocabulary

SPLITS = ("train", "dev", "test")


class CorpusFormatError(ValueError):
    def __init__(self, path, lineno: int, msg: str):
        self.path = str(path)
        self.lineno = lineno
        super().__init__(f"{path}:{lineno}: {msg}")


@dataclass(frozen=True)
class TaskConfig:
    src_vocab: int = 64
    tgt_vocab: int = 64
    min_len: int = 4
    max_len: int = 16
    rho: float = 0.15
    extra_p: float = 0.5  # geometric continuation probability for extra tokens
    max_extra: int = 2
    alt_prob: float = 0.5  # chance a token takes an alternative image
    n_alts: int = 3
    n_train: int = 10_000
    n_dev: int = 500
    n_test: int = 1000
    seed: int = 0

    def __post_init__(self):
        if self.min_len < 1 or self.max_len < self.min_len:
            raise ValueError("need 1 <= min_len <= max_len")
        if not 0.0 <= self.rho < 1.0:
            raise ValueError("rho must lie in [0, 1)")
        if not 0.0 <= self.extra_p < 1.0 or self.max_extra < 0:
            raise ValueError("bad length-jitter parameters")
        if not 0.0 <= self.alt_prob <= 1.0:
            raise ValueError("alt_prob must lie in [0, 1]")
        if self.tgt_vocab - 4 < self.src_vocab - 4:
            raise ValueError(
                f"target vocabulary ({self.tgt_vocab - 4} content tokens) too small for a "
                f"bijection from {self.src_vocab - 4} source tokens")
        if self.alt_prob > 0 and self.n_alts >= self.src_vocab - 4:
            raise ValueError("n_alts must be smaller than the number of content tokens")

    def vocabularies(self) -> tuple[Vocabulary, Vocabulary]:
        return Vocabulary.synthetic(self.src_vocab, "s"), Vocabulary.synthetic(self.tgt_vocab, "t")


Pair = tuple[tuple[int, ...], tuple[int, ...]]


@dataclass
class Corpus:
    pairs: list[Pair]
    split: str
    fingerprint: str = ""
    truncated: list[bool] | None = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        for i, (src, tgt) in enumerate(self.pairs):
            _check_pair(src, tgt, i)
        if not self.fingerprint:
            self.fingerprint = fingerprint(self.pairs)

    def __len__(self) -> int:
        return len(self.pairs)

    def sources(self) -> list[tuple[int, ...]]:
        return [p[0] for p in self.pairs]

    def targets(self) -> list[tuple[int, ...]]:
        return [p[1] for p in self.pairs]


def _check_pair(src, tgt, where) -> None:
    for side, seq in (("source", src), ("target", tgt)):
        if len(seq) == 0 or seq[-1] != EOS:
            raise ValueError(f"pair {where}: {side} must end with <eos>")
        if any(tok < 4 for tok in seq[:-1]):
            raise ValueError(f"pair {where}: reserved token inside {side}")


def fingerprint(pairs: Sequence[Pair]) -> str:
    h = hashlib.sha256()
    for src, tgt in pairs:
        h.update(" ".join(map(str, src)).encode())
        h.update(b"\t")
        h.update(" ".join(map(str, tgt)).encode())
        h.update(b"\n")
    return h.hexdigest()[:16]


def _extra_count(rng: np.random.Generator, p: float, cap: int) -> int:
    k = 0
    while k < cap and rng.random() < p:
        k += 1
    return k


def generate_corpus(config: TaskConfig) -> tuple[Corpus, Corpus, Corpus]:
    """Train/dev/test corpora, deterministic in ``config.seed``.

    Content and truncation draw from separate streams, so a run with
    ``rho = 0`` yields the clean counterpart of every noisy train target.
    """
    n_src = config.src_vocab - 4
    n_tgt = config.tgt_vocab - 4
    root = np.random.SeedSequence(config.seed)
    map_ss, content_ss, trunc_ss = root.spawn(3)
    map_rng = np.random.default_rng(map_ss)
    primary = map_rng.permutation(n_tgt)[:n_src]
    alts = np.stack([np.roll(primary, -(j + 1)) for j in range(config.n_alts)], axis=1)

    out = []
    content_streams = content_ss.spawn(len(SPLITS))
    trunc_streams = trunc_ss.spawn(len(SPLITS))
    for split, n, c_ss, t_ss in zip(SPLITS, (config.n_train, config.n_dev, config.n_test),
                                    content_streams, trunc_streams):
        rng = np.random.default_rng(c_ss)
        trng = np.random.default_rng(t_ss)
        pairs, flags = [], []
        for _ in range(n):
            L = int(rng.integers(config.min_len, config.max_len + 1))
            src = rng.integers(0, n_src, size=L)
            tgt = primary[src].copy()
            if config.alt_prob > 0:
                swap = rng.random(L) < config.alt_prob
                which = rng.integers(0, config.n_alts, size=L)
                tgt[swap] = alts[src[swap], which[swap]]
            k = _extra_count(rng, config.extra_p, config.max_extra)
            if k:
                tgt = np.concatenate([tgt, primary[rng.integers(0, n_src, size=k)]])
            cut = False
            # both draws happen for every pair so the stream stays aligned across rho
            u, pos = trng.random(), trng.random()
            if split == "train" and len(tgt) >= 2 and u < config.rho:
                keep = 1 + int(pos * (len(tgt) - 1))
                tgt = tgt[:keep]
                cut = True
            pairs.append((tuple(int(x) + 4 for x in src) + (EOS,),
                          tuple(int(x) + 4 for x in tgt) + (EOS,)))
            flags.append(cut)
        out.append(Corpus(pairs, split, truncated=flags))
    return tuple(out)


# ---------------------------------------------------------------------------
# persistence


def save_corpus(corpus: Corpus, path: str | Path, src_vocab: Vocabulary, tgt_vocab: Vocabulary) -> None:
    lines = []
    for src, tgt in corpus.pairs:
        lines.append(" ".join(src_vocab.decode(src)) + "\t" + " ".join(tgt_vocab.decode(tgt)))
    Path(path).write_text("".join(ln + "\n" for ln in lines), encoding="utf-8")


def _parse_side(field_: str, vocab: Vocabulary, path, lineno: int, side: str) -> tuple[int, ...]:
    ids = []
    for tok in field_.split():
        idx = vocab.index.get(tok)
        if idx is None:
            raise CorpusFormatError(path, lineno, f"unknown {side} token {tok!r}")
        if idx < 4:
            raise CorpusFormatError(path, lineno, f"reserved token {tok!r} in {side}")
        ids.append(idx)
    return tuple(ids) + (EOS,)


def load_corpus(path: str | Path, src_vocab: Vocabulary, tgt_vocab: Vocabulary,
                split: str | None = None) -> Corpus:
    path = Path(path)
    pairs = []
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            fields_ = line.split("\t")
            if len(fields_) != 2:
                raise CorpusFormatError(path, lineno, f"expected 2 tab-separated fields, got {len(fields_)}")
            pairs.append((_parse_side(fields_[0], src_vocab, path, lineno, "source"),
                          _parse_side(fields_[1], tgt_vocab, path, lineno, "target")))
    return Corpus(pairs, split or path.stem)


def save_dataset(out_dir: str | Path, config: TaskConfig, corpora: Sequence[Corpus]) -> None:
    """Write vocabularies, the three splits and a manifest with fingerprints."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    sv, tv = config.vocabularies()
    sv.save(out / "vocab.src")
    tv.save(out / "vocab.tgt")
    for c in corpora:
        save_corpus(c, out / f"{c.split}.txt", sv, tv)
    manifest = {"task": asdict(config), "fingerprints": {c.split: c.fingerprint for c in corpora},
                "truncated": {c.split: int(sum(c.truncated)) for c in corpora if c.truncated is not None}}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_dataset(data_dir: str | Path) -> tuple[Vocabulary, Vocabulary, dict[str, Corpus]]:
    d = Path(data_dir)
    sv = Vocabulary.load(d / "vocab.src")
    tv = Vocabulary.load(d / "vocab.tgt")
    corpora = {s: load_corpus(d / f"{s}.txt", sv, tv, s) for s in SPLITS if (d / f"{s}.txt").exists()}
    manifest = d / "manifest.json"
    if manifest.exists():
        recorded = json.loads(manifest.read_text()).get("fingerprints", {})
        for s, c in corpora.items():
            if s in recorded and recorded[s] != c.fingerprint:
                raise ValueError(f"{s} split fingerprint {c.fingerprint} != manifest {recorded[s]}")
    return sv, tv, corpora


def batch_iterator(corpus: Corpus, batch_size: int, seed: int, epoch: int = 0) -> Iterator[list[Pair]]:
    """One epoch of shuffled batches; the order depends only on (seed, epoch)."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if len(corpus) == 0:
        raise ValueError("cannot batch an empty corpus")
    order = np.random.default_rng([seed, epoch]).permutation(len(corpus))
    for start in range(0, len(order), batch_size):
        yield [corpus.pairs[i] for i in order[start:start + batch_size]]

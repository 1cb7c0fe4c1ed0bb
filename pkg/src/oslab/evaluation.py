"""Corpus metrics, the alpha x seed x beam sweep, and report emission."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import traceback
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .data import Corpus, TaskConfig, generate_corpus, load_dataset, save_dataset
from .decoding import DecodeConfig, Hypothesis, beam_search
from .model import (ModelConfig, ModelParams, batch_log_probs, load_checkpoint,
                    save_checkpoint)
from .objectives import eos_prefix_stats, oversmoothing_rate
from .training import TrainConfig, finetune, pretrain
from .vocab import EOS

log = logging.getLogger(__name__)

SWEEP_COLUMNS = ("alpha", "seed", "beam", "os_rate", "eos_logprob", "eos_rank", "ppl", "len_ratio", "bleu")
METRICS = SWEEP_COLUMNS[3:]


def _strip(seq: Sequence[int]) -> tuple[int, ...]:
    seq = tuple(seq)
    return seq[:-1] if seq and seq[-1] == EOS else seq


def _ngrams(seq: tuple, n: int) -> Counter:
    return Counter(seq[i:i + n] for i in range(len(seq) - n + 1))


def corpus_bleu(references: Sequence[Sequence[int]], hypotheses: Sequence[Sequence[int]],
                max_n: int = 4) -> float:
    """Corpus BLEU (0-100), single reference, no smoothing; trailing <eos> ignored."""
    if len(references) != len(hypotheses):
        raise ValueError(f"{len(references)} references vs {len(hypotheses)} hypotheses")
    if not references:
        raise ValueError("BLEU of an empty corpus")
    matches = [0] * max_n
    totals = [0] * max_n
    r_len = c_len = 0
    for ref, hyp in zip(references, hypotheses):
        ref, hyp = _strip(ref), _strip(hyp)
        r_len += len(ref)
        c_len += len(hyp)
        for n in range(1, max_n + 1):
            h = _ngrams(hyp, n)
            r = _ngrams(ref, n)
            matches[n - 1] += sum(min(c, r[g]) for g, c in h.items())
            totals[n - 1] += max(0, len(hyp) - n + 1)
    if c_len == 0 or min(matches) == 0:
        return 0.0
    log_prec = sum(math.log(m / t) for m, t in zip(matches, totals)) / max_n
    bp = math.exp(min(0.0, 1.0 - r_len / c_len))
    return 100.0 * bp * math.exp(log_prec)


def length_ratio(references: Sequence[Sequence[int]], hypotheses: Sequence[Sequence[int]]) -> float:
    """Mean of |ref| / |hyp| with <eos> excluded and each length floored at 1."""
    if len(references) != len(hypotheses):
        raise ValueError(f"{len(references)} references vs {len(hypotheses)} hypotheses")
    if not references:
        raise ValueError("length ratio of an empty corpus")
    ratios = [max(1, len(_strip(r))) / max(1, len(_strip(h))) for r, h in zip(references, hypotheses)]
    return float(np.mean(ratios))


# ---------------------------------------------------------------------------
# reports


@dataclass
class SweepRow:
    alpha: float
    seed: int
    beam: int
    os_rate: float
    eos_logprob: float
    eos_rank: float
    ppl: float
    len_ratio: float
    bleu: float

    def key(self) -> tuple:
        return (self.alpha, self.seed, self.beam)


@dataclass
class SweepReport:
    rows: list[SweepRow] = field(default_factory=list)
    failures: list[dict] = field(default_factory=list)

    def __post_init__(self):
        keys = [r.key() for r in self.rows]
        if len(set(keys)) != len(keys):
            raise ValueError("duplicate (alpha, seed, beam) rows")
        self.rows.sort(key=SweepRow.key)

    def alphas(self) -> list[float]:
        return sorted({r.alpha for r in self.rows})

    def beams(self) -> list[int]:
        return sorted({r.beam for r in self.rows})

    def seeds(self) -> list[int]:
        return sorted({r.seed for r in self.rows})

    def select(self, alpha=None, seed=None, beam=None) -> list[SweepRow]:
        return [r for r in self.rows if (alpha is None or r.alpha == alpha)
                and (seed is None or r.seed == seed) and (beam is None or r.beam == beam)]

    def aggregates(self) -> list[dict]:
        """Mean and (population) standard deviation across seeds per (alpha, beam)."""
        out = []
        for a in self.alphas():
            for b in self.beams():
                rows = self.select(alpha=a, beam=b)
                if not rows:
                    continue
                rec = {"alpha": a, "beam": b, "n_seeds": len(rows)}
                for m in METRICS:
                    vals = np.array([getattr(r, m) for r in rows])
                    rec[f"{m}_mean"] = float(vals.mean())
                    rec[f"{m}_std"] = float(vals.std())
                out.append(rec)
        return out

    def mean(self, metric: str, alpha: float, beam: int | None = None) -> float:
        beam = self.beams()[0] if beam is None else beam
        return float(np.mean([getattr(r, metric) for r in self.select(alpha=alpha, beam=beam)]))


def write_sweep_csv(report: SweepReport, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SWEEP_COLUMNS)
        for r in report.rows:
            w.writerow([repr(r.alpha), r.seed, r.beam] + [repr(float(getattr(r, m))) for m in METRICS])


def read_sweep_csv(path: str | Path) -> SweepReport:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != SWEEP_COLUMNS:
            raise ValueError(f"{path}: expected columns {SWEEP_COLUMNS}, got {reader.fieldnames}")
        rows = [SweepRow(float(d["alpha"]), int(d["seed"]), int(d["beam"]),
                         *(float(d[m]) for m in METRICS)) for d in reader]
    return SweepReport(rows)


# ---------------------------------------------------------------------------
# evaluation of one model


def teacher_forced(model, pairs: Sequence, batch_size: int = 100) -> list[np.ndarray]:
    """Per-pair T x V log-prob matrices on the gold targets, no dropout."""
    if not isinstance(model, ModelParams):
        return [np.asarray(model.teacher_forced(s, t)) for s, t in pairs]
    out = []
    for start in range(0, len(pairs), batch_size):
        chunk = pairs[start:start + batch_size]
        logp, _, lengths = batch_log_probs(model, [p[0] for p in chunk], [p[1] for p in chunk])
        out.extend(logp.data[i, :T].copy() for i, T in enumerate(lengths))
    return out


def likelihood_metrics(model, corpus: Corpus) -> dict[str, float]:
    """Oversmoothing rate, <eos> prefix stats and perplexity on gold targets.

    Rate and <eos> statistics are averaged per sentence first, then across
    sentences; single-token targets are left out of the <eos> statistics.
    """
    slps = teacher_forced(model, corpus.pairs)
    rates, logps, ranks = [], [], []
    lp_total, n_tok = 0.0, 0
    for slp, (_, tgt) in zip(slps, corpus.pairs):
        rep = oversmoothing_rate(slp, tgt)
        rates.append(rep.rate)
        if not rep.degenerate:
            lp, rk = eos_prefix_stats(slp, tgt)
            logps.append(lp)
            ranks.append(rk)
        lp_total += float(slp[np.arange(len(tgt)), np.asarray(tgt)].sum())
        n_tok += len(tgt)
    return {
        "os_rate": float(np.mean(rates)),
        "eos_logprob": float(np.mean(logps)) if logps else math.nan,
        "eos_rank": float(np.mean(ranks)) if ranks else math.nan,
        "ppl": math.exp(-lp_total / n_tok),
    }


def decode_corpus(model, sources: Sequence[Sequence[int]], config: DecodeConfig,
                  workers: int = 1) -> list[Hypothesis]:
    def best(src):
        return beam_search(model, src, config)[0]

    if workers <= 1:
        return [best(s) for s in sources]
    with ThreadPoolExecutor(workers) as pool:
        return list(pool.map(best, sources))


def _check_vocab(model, corpus: Corpus) -> None:
    if not isinstance(model, ModelParams):
        return
    cfg = model.config
    src_max = max(max(s) for s, _ in corpus.pairs)
    tgt_max = max(max(t) for _, t in corpus.pairs)
    if src_max >= cfg.src_vocab or tgt_max >= cfg.tgt_vocab:
        raise ValueError(f"corpus token ids (source max {src_max}, target max {tgt_max}) exceed model "
                         f"vocabularies ({cfg.src_vocab}, {cfg.tgt_vocab})")


def evaluate_checkpoint(model, corpus: Corpus, beams: Iterable[int], alpha: float = 0.0,
                        seed: int = 0, decode: DecodeConfig = DecodeConfig(),
                        workers: int = 1) -> list[SweepRow]:
    """One row per beam width for a single model on ``corpus``."""
    if len(corpus) == 0:
        raise ValueError("empty evaluation corpus")
    _check_vocab(model, corpus)
    lik = likelihood_metrics(model, corpus)
    refs = corpus.targets()
    rows = []
    for k in beams:
        hyps = decode_corpus(model, corpus.sources(), replace(decode, beam_width=int(k)), workers)
        toks = [h.tokens for h in hyps]
        rows.append(SweepRow(alpha, seed, int(k), lik["os_rate"], lik["eos_logprob"], lik["eos_rank"],
                             lik["ppl"], length_ratio(refs, toks), corpus_bleu(refs, toks)))
    return rows


# ---------------------------------------------------------------------------
# sweep


def _digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:16]


def _train_key(cfg: TrainConfig) -> dict:
    d = asdict(cfg)
    d.pop("record_time")
    return d


@dataclass
class SweepSpec:
    alphas: Sequence[float] = (0.0, 0.3, 0.6, 0.9)
    seeds: Sequence[int] = (0, 1, 2)
    beams: Sequence[int] = (1, 5, 25, 100)
    model: dict = field(default_factory=dict)  # ModelConfig overrides (vocab sizes come from data)
    pretrain: TrainConfig = field(default_factory=TrainConfig)
    finetune: TrainConfig | None = None  # defaults to ``pretrain``
    decode: DecodeConfig = field(default_factory=DecodeConfig)
    eval_split: str = "test"


def desk_spec(seeds: Sequence[int] = (0, 1, 2)) -> SweepSpec:
    """The single-CPU sweep preset: a shorter, faster-warming schedule than the library default."""
    pre = TrainConfig(lr=2e-3, max_updates=4000, valid_every=500)
    return SweepSpec(seeds=tuple(seeds), pretrain=pre, finetune=replace(pre, max_updates=1500))


def _write_json(path: Path, obj) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    tmp.replace(path)


def _pretrained(out: Path, seed: int, mcfg: ModelConfig, corpora: dict, spec: SweepSpec,
                data_fp: dict) -> ModelParams:
    tcfg = replace(spec.pretrain, seed=seed)
    key = _digest({"data": data_fp, "model": asdict(mcfg), "train": _train_key(tcfg), "seed": seed})
    d = out / f"seed{seed}"
    d.mkdir(parents=True, exist_ok=True)
    marker = d / f"pretrain.{key}.done"
    ckpt = d / "pretrain.ckpt"
    if marker.exists() and ckpt.exists():
        return load_checkpoint(ckpt)
    log.info("pretraining seed %d", seed)
    params, tlog = pretrain(mcfg, corpora["train"], corpora["dev"], tcfg)
    save_checkpoint(params, ckpt)
    tlog.write_csv(d / "pretrain_log.csv")
    marker.write_text(key + "\n")
    return params


def _cell(out: Path, seed: int, alpha: float, base: ModelParams, corpora: dict, spec: SweepSpec,
          data_fp: dict) -> list[SweepRow]:
    ft_cfg = replace(spec.finetune or spec.pretrain, seed=seed)
    key = _digest({"data": data_fp, "model": asdict(base.config), "pretrain": _train_key(replace(spec.pretrain, seed=seed)),
                   "finetune": _train_key(ft_cfg), "seed": seed, "alpha": alpha})
    d = out / f"seed{seed}" / f"alpha{alpha:g}"
    d.mkdir(parents=True, exist_ok=True)
    marker = d / f"cell.{key}.done"
    ckpt = d / "finetune.ckpt"
    if marker.exists() and ckpt.exists():
        params = load_checkpoint(ckpt)
    else:
        for stale in d.glob("*"):
            stale.unlink()
        log.info("fine-tuning seed %d alpha %g", seed, alpha)
        params, tlog = finetune(base, corpora["train"], corpora["dev"], ft_cfg, alpha)
        save_checkpoint(params, ckpt)
        tlog.write_csv(d / "finetune_log.csv")
        marker.write_text(key + "\n")

    corpus = corpora[spec.eval_split]
    rows = []
    missing = []
    for k in spec.beams:
        f = d / f"eval.{_digest({'cell': key, 'beam': k, 'decode': asdict(spec.decode), 'split': spec.eval_split, 'fp': corpus.fingerprint})}.json"
        if f.exists():
            rows.append(SweepRow(**json.loads(f.read_text())))
        else:
            missing.append((k, f))
    if missing:
        new = evaluate_checkpoint(params, corpus, [k for k, _ in missing], alpha, seed, spec.decode)
        for row, (_, f) in zip(new, missing):
            _write_json(f, asdict(row))
            rows.append(row)
    return rows


def run_sweep(out_dir: str | Path, spec: SweepSpec, task: TaskConfig | None = None,
              data_dir: str | Path | None = None) -> SweepReport:
    """Pretrain per seed, fine-tune per (alpha, seed), evaluate per beam.

    Completed pretraining runs, cells and per-beam evaluations are skipped on
    rerun (marker files keyed by a hash of the configs).  A failing cell is
    recorded in ``report.failures`` and the sweep moves on.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if data_dir is None:
        data_dir = out / "data"
        if not (data_dir / "manifest.json").exists():
            if task is None:
                raise ValueError("need a task config or an existing data directory")
            save_dataset(data_dir, task, generate_corpus(task))
    src_v, tgt_v, corpora = load_dataset(data_dir)
    data_fp = {s: c.fingerprint for s, c in corpora.items()}
    mcfg_kw = {**spec.model, "src_vocab": len(src_v), "tgt_vocab": len(tgt_v)}

    report = SweepReport()
    rows: list[SweepRow] = []
    for seed in spec.seeds:
        mcfg = ModelConfig(**{**mcfg_kw, "seed": seed, "dropout_rate": spec.pretrain.dropout})
        try:
            base = _pretrained(out, seed, mcfg, corpora, spec, data_fp)
        except Exception as exc:  # noqa: BLE001 - recorded, sweep continues
            log.error("pretraining seed %d failed: %s", seed, exc)
            report.failures.append({"seed": seed, "alpha": None, "error": repr(exc),
                                    "trace": traceback.format_exc()})
            continue
        for alpha in spec.alphas:
            try:
                rows.extend(_cell(out, seed, float(alpha), base, corpora, spec, data_fp))
            except Exception as exc:  # noqa: BLE001
                log.error("cell seed %d alpha %g failed: %s", seed, alpha, exc)
                report.failures.append({"seed": seed, "alpha": float(alpha), "error": repr(exc),
                                        "trace": traceback.format_exc()})
    report = SweepReport(rows, report.failures)
    write_sweep_csv(report, out / "sweep.csv")
    _write_json(out / "failures.json", report.failures)
    return report


# ---------------------------------------------------------------------------
# charts


_FIGURES = (
    ("os_rate", "oversmoothing rate", False),
    ("eos_logprob", "<eos> log-prob at premature positions", False),
    ("eos_rank", "normalized <eos> rank (1 = least probable)", False),
    ("ppl", "perplexity on references", False),
    ("len_ratio", "sentence-level length ratio", True),
    ("bleu", "BLEU", True),
)


def emit_report(report: SweepReport, out_dir: str | Path) -> list[Path]:
    """Write sweep.csv, aggregates.csv and one SVG chart per metric."""
    if not report.rows:
        raise ValueError("empty report")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if not out.is_dir():
        raise NotADirectoryError(out)
    written = [out / "sweep.csv", out / "aggregates.csv"]
    write_sweep_csv(report, written[0])
    aggs = report.aggregates()
    with open(written[1], "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(aggs[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(aggs)

    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    alphas = np.array(report.alphas())
    for metric, label, per_beam in _FIGURES:
        fig, ax = plt.subplots(figsize=(5, 3.5))
        beams = report.beams() if per_beam else report.beams()[:1]
        for b in beams:
            sel = [a for a in aggs if a["beam"] == b]
            mean = np.array([a[f"{metric}_mean"] for a in sel])
            std = np.array([a[f"{metric}_std"] for a in sel])
            xs = np.array([a["alpha"] for a in sel])
            line, = ax.plot(xs, mean, marker="o", label=f"beam {b}" if per_beam else None)
            ax.fill_between(xs, mean - std, mean + std, color=line.get_color(), alpha=0.2)
        ax.set_xlabel("alpha")
        ax.set_ylabel(label)
        ax.set_xticks(alphas)
        if per_beam:
            ax.legend(fontsize=8)
        fig.tight_layout()
        path = out / f"{metric}_vs_alpha.svg"
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)
        written.append(path)
    return written

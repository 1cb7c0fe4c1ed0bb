"""Command-line entry point: ``oslab <subcommand> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

from .data import TaskConfig, generate_corpus, load_dataset, save_dataset
from .decoding import DecodeConfig, beam_search, write_decoded
from .evaluation import (SweepSpec, emit_report, evaluate_checkpoint, read_sweep_csv,
                         run_sweep, write_sweep_csv, SweepReport)
from .model import ModelConfig, load_checkpoint, save_checkpoint
from .training import TrainConfig, finetune, pretrain


def _floats(text: str) -> list[float]:
    return [float(x) for x in text.split(",") if x.strip()]


def _ints(text: str) -> list[int]:
    return [int(x) for x in text.split(",") if x.strip()]


def _add_train_opts(p: argparse.ArgumentParser, label_smoothing: float = 0.1) -> None:
    d = TrainConfig()
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--warmup", type=int, default=d.warmup)
    p.add_argument("--lr", type=float, default=d.lr)
    p.add_argument("--dropout", type=float, default=d.dropout)
    p.add_argument("--label-smoothing", type=float, default=label_smoothing)
    p.add_argument("--batch", type=int, default=d.batch_size)
    p.add_argument("--patience", type=int, default=d.patience)
    p.add_argument("--valid-every", type=int, default=d.valid_every)
    p.add_argument("--max-updates", type=int, default=d.max_updates)
    p.add_argument("--weight-decay", type=float, default=d.weight_decay)
    p.add_argument("--margin", type=float, default=d.margin)


def _train_config(args) -> TrainConfig:
    return TrainConfig(lr=args.lr, warmup=args.warmup, dropout=args.dropout,
                       label_smoothing=args.label_smoothing, batch_size=args.batch,
                       patience=args.patience, valid_every=args.valid_every,
                       max_updates=args.max_updates, weight_decay=args.weight_decay,
                       margin=args.margin, seed=args.seed)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="oslab", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    t = TaskConfig()
    p = sub.add_parser("gen-data", help="generate the synthetic translation task")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--rho", type=float, default=t.rho)
    p.add_argument("--vocab", type=int, default=t.src_vocab)
    p.add_argument("--min-len", type=int, default=t.min_len)
    p.add_argument("--max-len", type=int, default=t.max_len)
    p.add_argument("--train", type=int, default=t.n_train)
    p.add_argument("--dev", type=int, default=t.n_dev)
    p.add_argument("--test", type=int, default=t.n_test)
    p.add_argument("--alt-prob", type=float, default=t.alt_prob)
    p.add_argument("--extra-p", type=float, default=t.extra_p)

    m = ModelConfig(src_vocab=64, tgt_vocab=64)
    p = sub.add_parser("train", help="pretrain with label-smoothed NLL")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--d-embed", type=int, default=m.d_embed)
    p.add_argument("--d-hidden", type=int, default=m.d_hidden)
    _add_train_opts(p)

    p = sub.add_parser("finetune", help="fine-tune with the oversmoothing-regularized objective")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--alpha", type=float, required=True)
    p.add_argument("--out", required=True)
    _add_train_opts(p, label_smoothing=0.0)

    p = sub.add_parser("decode", help="beam-search a corpus split")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--beam", type=int, default=5)
    p.add_argument("--out", required=True)

    p = sub.add_parser("evaluate", help="metrics for one checkpoint at several beam widths")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--beams", type=_ints, default=[1, 5, 25, 100])
    p.add_argument("--out", required=True)

    p = sub.add_parser("sweep", help="alpha x seed x beam sweep (resumable)")
    p.add_argument("--data", required=True)
    p.add_argument("--alphas", type=_floats, default=[0.0, 0.3, 0.6, 0.9])
    p.add_argument("--seeds", type=int, default=3)
    p.add_argument("--beams", type=_ints, default=[1, 5, 25, 100])
    p.add_argument("--out", required=True)
    p.add_argument("--d-embed", type=int, default=m.d_embed)
    p.add_argument("--d-hidden", type=int, default=m.d_hidden)
    p.add_argument("--finetune-updates", type=int, default=None)
    _add_train_opts(p)

    p = sub.add_parser("report", help="render sweep.csv into CSV aggregates and SVG charts")
    p.add_argument("--sweep", required=True)
    p.add_argument("--out", required=True)
    return parser


def _cmd_gen_data(args) -> int:
    cfg = TaskConfig(src_vocab=args.vocab, tgt_vocab=args.vocab, min_len=args.min_len,
                     max_len=args.max_len, rho=args.rho, n_train=args.train, n_dev=args.dev,
                     n_test=args.test, alt_prob=args.alt_prob, extra_p=args.extra_p, seed=args.seed)
    corpora = generate_corpus(cfg)
    save_dataset(args.out, cfg, corpora)
    print(json.dumps({c.split: {"pairs": len(c), "fingerprint": c.fingerprint} for c in corpora}))
    return 0


def _cmd_train(args) -> int:
    sv, tv, corpora = load_dataset(args.data)
    tcfg = _train_config(args)
    mcfg = ModelConfig(len(sv), len(tv), args.d_embed, args.d_hidden, tcfg.dropout, args.seed)
    params, tlog = pretrain(mcfg, corpora["train"], corpora["dev"], tcfg)
    save_checkpoint(params, args.out)
    tlog.write_csv(str(args.out) + ".log.csv")
    return 0


def _cmd_finetune(args) -> int:
    sv, tv, corpora = load_dataset(args.data)
    base = load_checkpoint(args.ckpt, sv, tv)
    params, tlog = finetune(base, corpora["train"], corpora["dev"], _train_config(args), args.alpha)
    save_checkpoint(params, args.out)
    tlog.write_csv(str(args.out) + ".log.csv")
    return 0


def _cmd_decode(args) -> int:
    sv, tv, corpora = load_dataset(args.data)
    params = load_checkpoint(args.ckpt, sv, tv)
    corpus = corpora[args.split]
    cfg = DecodeConfig(beam_width=args.beam)
    hyps = [beam_search(params, s, cfg)[0] for s in corpus.sources()]
    write_decoded(args.out, corpus.sources(), hyps, tv)
    return 0


def _cmd_evaluate(args) -> int:
    sv, tv, corpora = load_dataset(args.data)
    params = load_checkpoint(args.ckpt, sv, tv)
    rows = evaluate_checkpoint(params, corpora[args.split], args.beams, alpha=params.alpha,
                               seed=params.config.seed)
    write_sweep_csv(SweepReport(rows), args.out)
    return 0


def _cmd_sweep(args) -> int:
    tcfg = _train_config(args)
    ft = None
    if args.finetune_updates is not None:
        ft = TrainConfig(**{**asdict(tcfg), "max_updates": args.finetune_updates})
    spec = SweepSpec(alphas=args.alphas, seeds=list(range(args.seeds)), beams=args.beams,
                     model={"d_embed": args.d_embed, "d_hidden": args.d_hidden},
                     pretrain=tcfg, finetune=ft)
    report = run_sweep(args.out, spec, data_dir=args.data)
    emit_report(report, args.out)
    if report.failures:
        for f in report.failures:
            print(json.dumps({"error": "cell_failed", "seed": f["seed"], "alpha": f["alpha"],
                              "message": f["error"]}), file=sys.stderr)
        return 3
    return 0


def _cmd_report(args) -> int:
    report = read_sweep_csv(Path(args.sweep) / "sweep.csv")
    emit_report(report, args.out)
    return 0


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "train": _cmd_train,
    "finetune": _cmd_finetune,
    "decode": _cmd_decode,
    "evaluate": _cmd_evaluate,
    "sweep": _cmd_sweep,
    "report": _cmd_report,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return _COMMANDS[args.command](args)
    except Exception as exc:  # noqa: BLE001 - reported as a machine-readable line
        print(json.dumps({"error": type(exc).__name__, "message": str(exc), "command": args.command}),
              file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

import json
import math
import xml.etree.ElementTree as ET

import numpy as np
import pytest

from oslab import cli
from oslab import evaluation as ev
from oslab.data import Corpus, TaskConfig, generate_corpus, save_dataset
from oslab.decoding import TableModel
from oslab.evaluation import (SweepReport, SweepRow, SweepSpec, corpus_bleu, emit_report,
                              evaluate_checkpoint, length_ratio, likelihood_metrics,
                              read_sweep_csv, run_sweep, teacher_forced, write_sweep_csv)
from oslab.model import load_checkpoint, save_checkpoint
from oslab.objectives import oversmoothing_rate
from oslab.training import TrainConfig
from oslab.vocab import EOS

from .helpers import tiny_model


def test_bleu_hand_counted_example():
    ref, hyp = [4, 5, 6, 7, EOS], [4, 5, 6, 7, 8, EOS]
    expected = 100 * (4 / 5 * 3 / 4 * 2 / 3 * 1 / 2) ** 0.25
    assert corpus_bleu([ref], [hyp]) == pytest.approx(expected, abs=1e-6)


def test_bleu_brevity_penalty():
    ref, hyp = [4, 5, 6, 7, 8, 9, EOS], [4, 5, 6, 7, EOS]
    assert corpus_bleu([ref], [hyp]) == pytest.approx(100 * math.exp(1 - 6 / 4), abs=1e-9)


def test_bleu_identity_zero_and_permutation():
    rng = np.random.default_rng(0)
    refs = [tuple(rng.integers(4, 30, size=rng.integers(4, 12))) + (EOS,) for _ in range(20)]
    assert corpus_bleu(refs, refs) == 100.0
    assert corpus_bleu(refs[:2], [(9, 8, 7, EOS), (5, 4, 6, EOS)]) == 0.0
    hyps = [r[:-2] + (EOS,) if i % 3 else r for i, r in enumerate(refs)]
    perm = rng.permutation(20)
    a = corpus_bleu(refs, hyps)
    b = corpus_bleu([refs[i] for i in perm], [hyps[i] for i in perm])
    assert a == b
    with pytest.raises(ValueError):
        corpus_bleu([], [])
    with pytest.raises(ValueError):
        corpus_bleu(refs, refs[:3])


def test_length_ratio_examples():
    refs = [(4,) * 4 + (EOS,), (5,) * 6 + (EOS,)]
    assert length_ratio(refs, [(4, 4, EOS), (5,) * 6 + (EOS,)]) == 1.5
    assert length_ratio(refs, refs) == 1.0
    assert length_ratio(refs, [(4, 4, EOS), (5, 5, 5, EOS)]) == 2.0
    assert length_ratio([(4, 4, EOS)], [(EOS,)]) == 2.0  # bare <eos> counts as length 1
    with pytest.raises(ValueError):
        length_ratio([], [])


def _perfect_model(corpus: Corpus, V: int) -> TableModel:
    table = {s: t for s, t in corpus.pairs}

    def fn(src, prefix):
        row = np.zeros(V)
        row[table[tuple(src)][len(prefix)]] = 1.0
        return row

    return TableModel(fn, V)


def test_perfect_model_limits():
    corpus = Corpus([((4, 5, EOS), (6, 7, 8, 9, EOS)), ((5, EOS), (9, 9, 8, 7, 6, EOS))], "test")
    rows = evaluate_checkpoint(_perfect_model(corpus, 12), corpus, [1, 5, 25])
    for r in rows:
        assert r.os_rate == 0.0 and r.ppl == 1.0 and r.bleu == 100.0 and r.len_ratio == 1.0


def test_rate_is_recomputed_from_dumped_log_probs():
    p = tiny_model(V=10, d=6, seed=2)
    corpus = Corpus([((4, 5, 6, EOS), (7, 8, 9, EOS)), ((6, EOS), (5, EOS)),
                     ((9, 8, EOS), (4, 4, 5, 6, EOS))], "test")
    dumped = [p.teacher_forced(s, t) for s, t in corpus.pairs]
    rates = [oversmoothing_rate(slp, t).rate for slp, (_, t) in zip(dumped, corpus.pairs)]
    lik = likelihood_metrics(p, corpus)
    assert lik["os_rate"] == pytest.approx(np.mean(rates), abs=1e-12)
    for a, b in zip(teacher_forced(p, corpus.pairs), dumped):
        np.testing.assert_allclose(a, b, rtol=0, atol=1e-12)


def test_copied_checkpoint_gives_identical_rows(tmp_path):
    p = tiny_model(V=10, d=6, seed=3)
    save_checkpoint(p, tmp_path / "a.ckpt")
    q = load_checkpoint(tmp_path / "a.ckpt")
    corpus = Corpus([((4, 5, 6, EOS), (7, 8, 9, EOS)), ((9, 8, EOS), (4, 5, EOS))], "test")
    assert evaluate_checkpoint(p, corpus, [1, 3]) == evaluate_checkpoint(q, corpus, [1, 3])
    assert evaluate_checkpoint(p, corpus, [3], workers=2) == evaluate_checkpoint(p, corpus, [3])


def test_vocabulary_mismatch_is_reported():
    corpus = Corpus([((4, 5, EOS), (20, EOS))], "test")
    with pytest.raises(ValueError, match="exceed"):
        evaluate_checkpoint(tiny_model(V=10), corpus, [1])


def _row(alpha, seed, beam, base=0.0):
    return SweepRow(alpha, seed, beam, 0.5 - alpha / 2 + base, -2.0 - alpha, 0.3 + alpha / 2,
                    3.0 + base, 1.0 + 0.01 * beam, 20.0 + seed)


def test_report_csv_round_trip_and_aggregates(tmp_path):
    rows = [_row(a, s, b, 0.01 * s) for a in (0.0, 0.5) for s in (0, 1, 2) for b in (1, 5)]
    report = SweepReport(rows)
    write_sweep_csv(report, tmp_path / "sweep.csv")
    back = read_sweep_csv(tmp_path / "sweep.csv")
    assert back.rows == report.rows
    agg = {(a["alpha"], a["beam"]): a for a in report.aggregates()}
    sel = [r.os_rate for r in rows if r.alpha == 0.5 and r.beam == 5]
    assert agg[(0.5, 5)]["os_rate_mean"] == pytest.approx(np.mean(sel), abs=1e-12)
    assert agg[(0.5, 5)]["os_rate_std"] == pytest.approx(np.std(sel), abs=1e-12)
    with pytest.raises(ValueError):
        SweepReport(rows + rows[:1])


def test_one_row_report_and_svgs(tmp_path):
    report = SweepReport([_row(0.0, 0, 1)])
    written = emit_report(report, tmp_path / "out")
    lines = (tmp_path / "out" / "sweep.csv").read_text().splitlines()
    assert lines[0] == ",".join(ev.SWEEP_COLUMNS)
    assert len(lines) == 2
    svgs = [p for p in written if p.suffix == ".svg"]
    assert len(svgs) == 6
    for p in svgs:
        root = ET.parse(p).getroot()
        assert root.tag == "{http://www.w3.org/2000/svg}svg"
        assert root.find(".//{http://www.w3.org/2000/svg}path") is not None
    with pytest.raises(ValueError):
        emit_report(SweepReport([]), tmp_path / "empty")
    (tmp_path / "file").write_text("x")
    with pytest.raises(OSError):
        emit_report(report, tmp_path / "file")


TINY_TASK = TaskConfig(src_vocab=12, tgt_vocab=12, min_len=2, max_len=5, n_train=120, n_dev=20,
                       n_test=20, alt_prob=0.3, n_alts=2)
TINY_TRAIN = TrainConfig(lr=5e-3, warmup=10, max_updates=30, valid_every=15, batch_size=16,
                         record_time=False)


def _tiny_spec(**kw):
    base = dict(alphas=[0.0], seeds=[0], beams=[1], model={"d_embed": 6, "d_hidden": 8},
                pretrain=TINY_TRAIN, finetune=TrainConfig(**{**TINY_TRAIN.__dict__, "max_updates": 15}))
    base.update(kw)
    return SweepSpec(**base)


def test_single_cell_sweep_and_idempotent_rerun(tmp_path, monkeypatch):
    report = run_sweep(tmp_path, _tiny_spec(), task=TINY_TASK)
    assert len(report.rows) == 1 and not report.failures
    first = (tmp_path / "sweep.csv").read_bytes()

    def boom(*a, **k):
        raise AssertionError("retrained despite markers")

    monkeypatch.setattr(ev, "pretrain", boom)
    monkeypatch.setattr(ev, "finetune", boom)
    again = run_sweep(tmp_path, _tiny_spec())
    assert again.rows == report.rows
    assert (tmp_path / "sweep.csv").read_bytes() == first


def test_failed_cell_is_recorded(tmp_path, monkeypatch):
    real = ev.finetune

    def flaky(base, train, dev, cfg, alpha):
        if alpha == 0.5:
            raise RuntimeError("injected")
        return real(base, train, dev, cfg, alpha)

    monkeypatch.setattr(ev, "finetune", flaky)
    report = run_sweep(tmp_path, _tiny_spec(alphas=[0.0, 0.5], beams=[1, 2]), task=TINY_TASK)
    assert len(report.rows) == 2
    assert [(f["seed"], f["alpha"]) for f in report.failures] == [(0, 0.5)]
    assert json.loads((tmp_path / "failures.json").read_text())[0]["alpha"] == 0.5


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("data")
    assert cli.main(["gen-data", "--out", str(d), "--vocab", "12", "--min-len", "2", "--max-len", "5",
                     "--train", "100", "--dev", "20", "--test", "15"]) == 0
    return d


def test_cli_pipeline(data_dir, tmp_path):
    ckpt, ft = tmp_path / "m.ckpt", tmp_path / "ft.ckpt"
    small = ["--max-updates", "20", "--valid-every", "10", "--warmup", "5", "--batch", "16"]
    assert cli.main(["train", "--data", str(data_dir), "--out", str(ckpt), "--d-embed", "6",
                     "--d-hidden", "8", *small]) == 0
    assert cli.main(["finetune", "--ckpt", str(ckpt), "--data", str(data_dir), "--alpha", "0.6",
                     "--out", str(ft), *small]) == 0
    assert load_checkpoint(ft).alpha == 0.6
    dec = tmp_path / "dec.txt"
    assert cli.main(["decode", "--ckpt", str(ft), "--data", str(data_dir), "--beam", "3",
                     "--out", str(dec)]) == 0
    assert len(dec.read_text().splitlines()) == 15
    csv_path = tmp_path / "eval.csv"
    assert cli.main(["evaluate", "--ckpt", str(ft), "--data", str(data_dir), "--beams", "1,3",
                     "--out", str(csv_path)]) == 0
    rep = read_sweep_csv(csv_path)
    assert [r.beam for r in rep.rows] == [1, 3] and rep.rows[0].alpha == 0.6
    out = tmp_path / "report"
    assert cli.main(["report", "--sweep", str(tmp_path), "--out", str(out)]) == 1  # no sweep.csv there
    (tmp_path / "sweep.csv").write_bytes(csv_path.read_bytes())
    assert cli.main(["report", "--sweep", str(tmp_path), "--out", str(out)]) == 0
    assert (out / "bleu_vs_alpha.svg").exists()


def test_cli_error_is_machine_readable(data_dir, tmp_path, capsys):
    code = cli.main(["decode", "--ckpt", str(tmp_path / "missing.ckpt"), "--data", str(data_dir),
                     "--out", str(tmp_path / "x")])
    assert code == 1
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert err["command"] == "decode" and err["error"] == "FileNotFoundError"


def test_cli_sweep_exit_status(data_dir, tmp_path, monkeypatch):
    args = ["sweep", "--data", str(data_dir), "--alphas", "0,0.5", "--seeds", "1", "--beams", "1",
            "--out", str(tmp_path), "--d-embed", "6", "--d-hidden", "8", "--max-updates", "10",
            "--valid-every", "5", "--warmup", "5", "--batch", "16"]
    real = ev.finetune

    def flaky(base, train, dev, cfg, alpha):
        if alpha == 0.5:
            raise RuntimeError("injected")
        return real(base, train, dev, cfg, alpha)

    monkeypatch.setattr(ev, "finetune", flaky)
    assert cli.main(args) == 3
    monkeypatch.setattr(ev, "finetune", real)
    assert cli.main(args) == 0
    assert len(read_sweep_csv(tmp_path / "sweep.csv").rows) == 2

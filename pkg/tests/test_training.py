import math

import numpy as np
import pytest

from oslab.data import Corpus, TaskConfig, generate_corpus
from oslab.model import ModelConfig, batch_log_probs, init_params, sequence_log_probs
from oslab.objectives import LossConfig, batch_mixed_loss, mixed_loss
from oslab.training import (EarlyStopper, OptimizerState, TrainConfig, TrainLog, adam_step,
                            evaluate_objective, finetune, lr_at, pretrain)
from oslab.vocab import EOS


def test_lr_schedule_values():
    cfg = TrainConfig(lr=5e-4, warmup=4000)
    assert lr_at(4000, cfg) == pytest.approx(5e-4, rel=1e-15)
    assert lr_at(1000, cfg) == pytest.approx(1.25e-4, rel=1e-15)
    assert lr_at(16000, cfg) == pytest.approx(2.5e-4, rel=1e-15)
    with pytest.raises(ValueError):
        lr_at(0, cfg)


def test_lr_schedule_shape():
    cfg = TrainConfig(lr=1e-3, warmup=50)
    vals = [lr_at(s, cfg) for s in range(1, 400)]
    assert np.all(np.diff(vals[:49]) > 0)
    assert np.all(np.diff(vals[49:]) <= 0)
    assert abs(lr_at(50, cfg) - lr_at(51, cfg)) < 2e-5


def test_adam_single_scalar_by_hand():
    cfg = TrainConfig(beta1=0.9, beta2=0.98, adam_eps=1e-8, weight_decay=0.01)
    params = {"w": np.array([1.0])}
    state = OptimizerState.zeros_like(params)
    new, st = adam_step(params, {"w": np.array([0.5])}, state, cfg, lr=0.1)
    m, v = 0.1 * 0.5, 0.02 * 0.25
    m_hat, v_hat = m / 0.1, v / 0.02
    expected = (1.0 - 0.1 * 0.01 * 1.0) - 0.1 * m_hat / (math.sqrt(v_hat) + 1e-8)
    assert new["w"][0] == pytest.approx(expected, abs=1e-15)
    assert st.m["w"][0] == pytest.approx(m, abs=1e-15)
    assert st.v["w"][0] == pytest.approx(v, abs=1e-15)
    assert st.step == 1 and state.step == 0 and params["w"][0] == 1.0


def test_adam_zero_gradient_cases():
    params = {"w": np.array([[1.0, -2.0]])}
    state = OptimizerState.zeros_like(params)
    new, st = adam_step(params, {"w": np.zeros((1, 2))}, state, TrainConfig(weight_decay=0.0), lr=0.1)
    assert np.array_equal(new["w"], params["w"])
    assert np.array_equal(st.m["w"], state.m["w"]) and np.array_equal(st.v["w"], state.v["w"])
    assert st.step == 1

    new, _ = adam_step(params, {"w": np.zeros((1, 2))}, state, TrainConfig(weight_decay=0.1), lr=0.01)
    np.testing.assert_allclose(new["w"], params["w"] * (1 - 0.01 * 0.1), rtol=0, atol=1e-15)


def test_adam_rejects_bad_gradients():
    params = {"w": np.ones(2)}
    state = OptimizerState.zeros_like(params)
    with pytest.raises(FloatingPointError):
        adam_step(params, {"w": np.array([1.0, np.nan])}, state, TrainConfig())
    with pytest.raises(ValueError):
        adam_step(params, {"w": np.ones(3)}, state, TrainConfig())


def test_early_stopper_scripted():
    stopper = EarlyStopper(patience=3)
    # 3.9999995 is within the 1e-6 tolerance, so it does not count as improvement
    script = [5.0, 4.0, 4.0, 3.0, 3.9999995, 3.0, 3.5]
    results = [stopper.update(v) for v in script]
    assert [r[0] for r in results] == [True, True, False, True, False, False, False]
    assert [r[1] for r in results] == [False] * 6 + [True]
    tight = EarlyStopper(patience=2)
    assert tight.update(1.0) == (True, False)
    assert tight.update(1.0 - 5e-7) == (False, False)
    assert tight.update(1.0 - 2e-6) == (True, False)


def _two_pair_corpus():
    return Corpus([((4, 5, 6, EOS), (7, 8, 9, EOS)), ((6, 5, EOS), (9, 8, 8, 10, EOS))], "train")


def test_tiny_pretrain_fits_two_pairs():
    corpus = _two_pair_corpus()
    mcfg = ModelConfig(src_vocab=12, tgt_vocab=12, d_embed=8, d_hidden=8, seed=0)
    cfg = TrainConfig(lr=1e-2, warmup=20, max_updates=200, valid_every=50, patience=10,
                      batch_size=2, dropout=0.0, record_time=False)
    loss = LossConfig(alpha=0.0, label_smoothing=0.0)
    before = evaluate_objective(init_params(mcfg), corpus, loss)[0]
    params, tlog = pretrain(mcfg, corpus, corpus, cfg)
    after = evaluate_objective(params, corpus, loss)[0]
    assert after < before
    assert len(tlog.records) == 4


@pytest.fixture(scope="module")
def small_task():
    cfg = TaskConfig(src_vocab=16, tgt_vocab=16, min_len=2, max_len=6, n_train=400, n_dev=60,
                     n_test=60, rho=0.3)
    return generate_corpus(cfg)


@pytest.fixture(scope="module")
def pretrained(small_task):
    train, dev, _ = small_task
    mcfg = ModelConfig(16, 16, d_embed=12, d_hidden=16, seed=1)
    cfg = TrainConfig(lr=5e-3, warmup=50, max_updates=400, valid_every=50, patience=20,
                      batch_size=16, record_time=False, seed=1)
    return mcfg, cfg, pretrain(mcfg, train, dev, cfg)


def test_pretrain_is_deterministic(small_task, pretrained, tmp_path):
    train, dev, _ = small_task
    mcfg, cfg, (params, tlog) = pretrained
    short = TrainConfig(**{**cfg.__dict__, "max_updates": 100})
    p1, l1 = pretrain(mcfg, train, dev, short)
    p2, l2 = pretrain(mcfg, train, dev, short)
    l1.write_csv(tmp_path / "a.csv")
    l2.write_csv(tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    for k in p1.tensors:
        assert np.array_equal(p1[k].data, p2[k].data)
    back = TrainLog.read_csv(tmp_path / "a.csv")
    assert [r.dev_objective for r in back.records] == [r.dev_objective for r in l1.records]


def test_returned_checkpoint_is_best_on_dev(small_task, pretrained):
    _, dev, _ = small_task
    _, cfg, (params, tlog) = pretrained
    loss = LossConfig(alpha=0.0, margin=cfg.margin, label_smoothing=cfg.label_smoothing)
    final = evaluate_objective(params, dev, loss)[0]
    logged = [r.dev_objective for r in tlog.records]
    assert all(final <= v + 1e-12 for v in logged)
    assert params.update_count == tlog.best_updates


def test_finetune_directions(small_task, pretrained):
    train, dev, _ = small_task
    _, cfg, (base, _) = pretrained
    ft = TrainConfig(**{**cfg.__dict__, "max_updates": 150, "valid_every": 50, "warmup": 20})
    nll = LossConfig(alpha=0.0)
    base_rate = evaluate_objective(base, dev, nll)[2]

    plain, _ = finetune(base, train, dev, ft, 0.0)
    assert plain.alpha == 0.0
    assert evaluate_objective(plain, dev, nll)[0] <= evaluate_objective(base, dev, nll)[0] + 1e-6

    strong, _ = finetune(base, train, dev, ft, 0.9)
    assert strong.alpha == 0.9
    assert evaluate_objective(strong, dev, nll)[2] < base_rate


def test_training_loss_matches_objectives_module(small_task, pretrained):
    train, _, _ = small_task
    _, _, (params, _) = pretrained
    batch = train.pairs[:7]
    for cfg in (LossConfig(0.0, 1e-4, 0.1), LossConfig(0.6, 1e-4)):
        logp, tgt, lengths = batch_log_probs(params, [p[0] for p in batch], [p[1] for p in batch])
        batched = batch_mixed_loss(logp, tgt, lengths, cfg).item()
        per = np.mean([mixed_loss(sequence_log_probs(params, s, t), t, cfg).item() for s, t in batch])
        assert batched == pytest.approx(per, abs=1e-12)

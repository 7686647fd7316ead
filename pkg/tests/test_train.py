import math

import numpy as np
import pytest

from duallm import train as tr
from duallm.data import Corpus, tokenize_lines
from duallm.model import ModelConfig, build
from duallm.synthetic import cycle_corpus
from duallm.train import (
    CLIP_GRID,
    SEQ_LEN_GRID,
    TEMPERATURE_GRID,
    DivergenceError,
    DynevalSettings,
    ReportRow,
    TrainSettings,
    compare_architectures,
    dynamic_eval,
    evaluate,
    format_report,
    report_csv,
    train_run,
    tune_posthoc,
)


def tiny(**kw):
    base = dict(recurrence="LSTM", embedding_units=8, recurrent_units=8, dual_units=8, seed=0)
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture(scope="module")
def cycle():
    toks = tokenize_lines(cycle_corpus(1000, vocab=10, seed=0))
    return Corpus.from_tokens(toks[:600], toks[600:800], toks[800:])


@pytest.fixture(scope="module")
def trained(cycle):
    cfg = tiny(embedding_units=16, recurrent_units=16, dual_units=16)
    ckpt, metrics = train_run(cfg, cycle, TrainSettings(epochs=10, batch_size=4, seq_len=20, lr=1e-2))
    return ckpt, metrics


def test_grids():
    assert SEQ_LEN_GRID == (5, 10, 15, 20, 25, 30, 35, 40, 45, 50, 55, 60, 65, 70)
    assert TEMPERATURE_GRID == (0.9, 0.95, 1.0, 1.05, 1.1, 1.15, 1.2, 1.25, 1.3)
    assert CLIP_GRID == (0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0)


def test_zero_learning_rate_keeps_initial_parameters(cycle):
    cfg = tiny(vocab_size=len(cycle.vocab))
    ckpt, metrics = train_run(cfg, cycle, TrainSettings(epochs=2, batch_size=4, seq_len=10, lr=0.0))
    store, _ = build(cfg)
    for name, p in store.items():
        np.testing.assert_array_equal(ckpt.params[name], p.data)
    assert len(metrics.log_lines()) == 2


def test_cycle_corpus_is_learned(trained, cycle):
    ckpt, metrics = trained
    assert len(metrics.epochs) == 10
    assert metrics.best_valid_ppl < 1.2
    assert evaluate(ckpt, cycle.test, 20).perplexity < 1.2


def test_best_checkpoint_is_argmin(trained):
    ckpt, metrics = trained
    ppls = [r.valid_ppl for r in metrics.epochs]
    assert ckpt.meta["epoch"] == metrics.best_epoch == 1 + int(np.argmin(ppls))
    assert ckpt.meta["valid_ppl"] == min(ppls)


def test_uniform_model_scores_vocab_size():
    _, model = build(tiny(vocab_size=17, init="zero"))
    ids = np.random.default_rng(0).integers(17, size=200)
    res = evaluate(model, ids, 7)
    assert res.perplexity == pytest.approx(17, abs=1e-3)
    assert res.tokens == 199


def test_perplexity_matches_independent_recount(trained, cycle):
    ckpt, _ = trained
    model = ckpt.restore()
    ids = cycle.test
    res = evaluate(model, ids, 6)
    # direct recount through the public probability interface
    state, nll = model.zero_state(1), 0.0
    for i in range(0, len(ids) - 1, 6):
        x = ids[i : min(i + 6, len(ids) - 1)][None]
        y = ids[i + 1 : i + 1 + x.shape[1]]
        probs, state = model.forward_window(x, state)
        nll -= np.sum(np.log(probs[0, np.arange(len(y)), y]))
    assert res.tokens == len(ids) - 1
    assert res.perplexity == pytest.approx(math.exp(nll / res.tokens), rel=1e-6)


def test_huge_temperature_approaches_vocab_size(trained, cycle):
    ckpt, _ = trained
    V = len(cycle.vocab)
    assert evaluate(ckpt, cycle.test, 20, temperature=1e6).perplexity == pytest.approx(V, rel=1e-3)


def test_dynamic_eval_at_zero_rate_equals_static(trained, cycle):
    ckpt, _ = trained
    model = ckpt.restore()
    before = model.params.snapshot()
    static = evaluate(model, cycle.test, 10)
    dyn = dynamic_eval(model, cycle.test, lr_eval=0.0, seq_len_eval=10)
    assert dyn.nll_sum == static.nll_sum and dyn.perplexity == static.perplexity
    for name, p in model.params.items():
        np.testing.assert_array_equal(p.data, before[name])


def test_dynamic_eval_restores_parameters_after_adapting(trained, cycle):
    ckpt, _ = trained
    model = ckpt.restore()
    before = model.params.snapshot()
    dyn = dynamic_eval(model, cycle.test, lr_eval=1e-2, seq_len_eval=5, adapt_on=cycle.valid)
    assert dyn.tokens == len(cycle.test) - 1
    for name, p in model.params.items():
        np.testing.assert_array_equal(p.data, before[name])
        assert p.grad is None


def test_tuning_flat_model_picks_smallest_values():
    _, model = build(tiny(vocab_size=9, init="zero"))
    ids = np.random.default_rng(1).integers(9, size=120)
    res = tune_posthoc(model, ids, "static", seq_len=25, temperature=1.0)
    assert res.settings == {"seq_len": 5, "temperature": 0.9}
    assert res.perplexity == res.default_perplexity


@pytest.mark.parametrize("mode", ["static", "dynamic"])
def test_tuning_never_worse_than_defaults(trained, cycle, mode):
    ckpt, _ = trained
    res = tune_posthoc(ckpt, cycle.valid[:120], mode, seq_len=20, temperature=1.0, lr_eval=1e-3)
    assert res.perplexity <= res.default_perplexity
    assert res.settings["seq_len"] in SEQ_LEN_GRID or res.settings["seq_len"] == 20
    assert res.settings["temperature"] in TEMPERATURE_GRID
    if mode == "dynamic":
        assert res.settings["clipnorm"] in CLIP_GRID
        assert res.settings["beta1"] in (0.9, 0.0)
        assert {s["beta1"] for s, _ in res.trials} == {0.9, 0.0}
    trials = {tuple(sorted(s.items())): p for s, p in res.trials}
    assert trials[tuple(sorted(res.settings.items()))] == res.perplexity


def test_training_is_deterministic(cycle):
    cfg = tiny(dropout_rec=0.2, dropout_rec_output=0.2, dropout_rec_input=0.1)
    settings = TrainSettings(epochs=2, batch_size=4, seq_len=10, lr=3e-3)
    a, ma = train_run(cfg, cycle, settings)
    b, mb = train_run(cfg, cycle, settings)
    assert ma.log_lines(False) == mb.log_lines(False)
    for name in a.params:
        np.testing.assert_array_equal(a.params[name], b.params[name])


def test_divergence_reports_last_good_checkpoint(cycle, monkeypatch):
    real = tr.nadam_step
    calls = {"n": 0}

    def poisoned(store, state):
        calls["n"] += 1
        real(store, state)
        if calls["n"] > 40:
            store["output.b_y"].data[:] = np.nan
        return state

    monkeypatch.setattr(tr, "nadam_step", poisoned)
    with pytest.raises(DivergenceError) as err:
        train_run(tiny(), cycle, TrainSettings(epochs=5, batch_size=4, seq_len=10, lr=3e-3))
    assert err.value.checkpoint is not None
    assert np.all(np.isfinite(err.value.checkpoint.params["output.b_y"]))
    assert len(err.value.metrics.epochs) == err.value.checkpoint.meta["epoch"]


def test_log_lines_format():
    m = tr.RunMetrics([tr.EpochRecord(1, 2.5, 12.25, 0.1234)])
    assert m.log_lines() == ["1\t2.500000\t12.250000\t0.123"]
    assert m.log_lines(False) == ["1\t2.500000\t12.250000\t0"]


def test_report_layout():
    rows = [
        ReportRow("LSTM", 22_890_000, 60.1, 58.2, 50.3, 49.4),
        ReportRow("Dual LSTM", 23_510_000, 59.0, 57.0, 49.0, 48.0),
        ReportRow("dLSTM", 123, 1.0, 2.0, 3.0, 4.0),
    ]
    text = format_report(rows)
    lines = text.splitlines()
    assert "No Dyneval" in lines[0] and "Dyneval" in lines[0]
    assert lines[1].split() == ["MODEL", "No.", "PARAMS", "Val.", "Test", "Val.", "Test"]
    assert "22.89 M" in text and "58.20" in text
    assert "" in lines  # blank line between recurrence groups
    csv_lines = report_csv(rows).splitlines()
    assert csv_lines[0] == "model,params,val,test,dyneval_val,dyneval_test"
    assert csv_lines[1] == "LSTM,22890000,60.100000,58.200000,50.300000,49.400000"


def test_compare_fills_every_cell(cycle):
    rows = compare_architectures(
        tiny(), cycle, TrainSettings(epochs=1, batch_size=4, seq_len=10, lr=3e-3),
        DynevalSettings(lr_eval=1e-3, seq_len_eval=10), recurrences=("LSTM", "dLSTM"),
    )
    assert [r.model for r in rows] == ["LSTM", "Dual LSTM", "dLSTM", "Dual dLSTM"]
    for r in rows:
        assert all(math.isfinite(v) and v > 1 for v in (r.val, r.test, r.dyn_val, r.dyn_test))
    assert rows[1].params > rows[0].params

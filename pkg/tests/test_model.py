import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from duallm import tensor as tn
from duallm.model import (
    CHECKPOINT_MAGIC,
    DROPOUT_FIELDS,
    L2_FIELDS,
    Checkpoint,
    ConfigError,
    ModelConfig,
    build,
    param_count,
)
from duallm.tensor import NonFiniteError

from conftest import central_diff, max_rel_err

PTB = dict(
    vocab_size=10000,
    embedding_units=850,
    recurrent_units=850,
    dual_units=850,
    recurrence="mdLSTM",
    mogrifier_rounds=4,
    mogrifier_rank=100,
)


def small(**kw):
    base = dict(vocab_size=7, embedding_units=3, recurrent_units=3, dual_units=3, dtype="float64")
    base.update(kw)
    return ModelConfig(**base)


def ids(rng, V, B, T):
    return rng.integers(V, size=(B, T))


# --- config ---------------------------------------------------------------------


def test_depth_derived_from_recurrence():
    assert small(recurrence="LSTM").layers == 1
    assert small(recurrence="dLSTM").layers == 2
    assert small(recurrence="mdLSTM", lstm_layers=3).layers == 3


@pytest.mark.parametrize(
    "changes,field",
    [
        (dict(vocab_size=0), "vocab_size"),
        (dict(architecture="Tri"), "architecture"),
        (dict(recurrence="LSTM", lstm_layers=2), "lstm_layers"),
        (dict(dropout_rec=1.0), "dropout_rec"),
        (dict(l2_rec=-1e-3), "l2_rec"),
        (dict(dual_units=4), "dual_units"),
        (dict(architecture="ERS", recurrent_units=4), "recurrent_units"),
        (dict(recurrence="mdLSTM", mogrifier_rounds=2, recurrent_units=4, dual_units=3, tie_weights=True), "embedding_units"),
        (dict(dtype="float16"), "dtype"),
    ],
)
def test_invalid_config_names_the_field(changes, field):
    with pytest.raises(ConfigError) as err:
        small(**changes).validate()
    assert err.value.field == field


def test_config_dict_roundtrip():
    cfg = small(recurrence="mdLSTM", mogrifier_rounds=3, dropout_rec=0.2)
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ConfigError):
        ModelConfig.from_dict({**cfg.to_dict(), "bogus": 1})


# --- build and tying ------------------------------------------------------------


def test_tied_output_aliases_embedding():
    store, model = build(small())
    assert store["output.W_y"] is store["embedding.W_ex"]
    assert "output.W_y" in store and "output.W_y" not in store.names()
    assert "output.W_y" in store.names(include_aliases=True)
    store["embedding.W_ex"].data[0, 0] = 123.0
    assert model.output.W_y.data[0, 0] == 123.0


def test_untied_output_is_separate():
    store, _ = build(small(tie_weights=False))
    assert store["output.W_y"] is not store["embedding.W_ex"]


def test_full_size_config_builds():
    cfg = ModelConfig(**PTB)
    store, _ = build(cfg)
    assert store["output.W_y"] is store["embedding.W_ex"]
    assert store.count() == param_count(cfg)


def test_same_seed_same_parameters():
    cfg = small(recurrence="mdLSTM", mogrifier_rounds=2, seed=3)
    a, _ = build(cfg)
    b, _ = build(cfg)
    c, _ = build(cfg.replace(seed=4))
    for name in a:
        np.testing.assert_array_equal(a[name].data, b[name].data)
    assert any(not np.array_equal(a[n].data, c[n].data) for n in a)


def test_forget_bias_starts_at_one():
    store, _ = build(small(recurrence="dLSTM"))
    for layer in (0, 1):
        np.testing.assert_array_equal(store[f"rec.{layer}.b_f"].data, 1.0)
        np.testing.assert_array_equal(store[f"rec.{layer}.b_i"].data, 0.0)


def test_init_bounds():
    cfg = ModelConfig(vocab_size=50, embedding_units=16, recurrent_units=25, dual_units=16)
    store, _ = build(cfg)
    assert np.abs(store["embedding.W_ex"].data).max() <= 1 / 4
    assert np.abs(store["rec.0.W_fh"].data).max() <= 1 / 5
    assert np.abs(store["dual.W_de"].data).max() <= 1 / 4


def test_parameter_names_by_architecture():
    ers, _ = build(small(architecture="ERS"))
    dual, _ = build(small())
    assert not any(n.startswith("dual.") for n in ers)
    assert {"dual.W_de", "dual.W_dh", "dual.b_d"} <= set(dual)
    assert set(dual) - set(ers) == {"dual.W_de", "dual.W_dh", "dual.b_d"}


def test_mogrifier_parameter_names():
    store, _ = build(small(recurrence="mdLSTM", mogrifier_rounds=3, mogrifier_rank=2))
    names = set(store)
    for layer in (0, 1):
        assert {f"rec.{layer}.mog.1.Q_l", f"rec.{layer}.mog.2.R_r", f"rec.{layer}.mog.3.Q_r", f"rec.{layer}.mog.3.b"} <= names
    assert store["rec.0.mog.1.Q_l"].shape == (3, 2)


# --- parameter count --------------------------------------------------------------


def test_full_size_count_near_23_million():
    n = param_count(ModelConfig(**PTB))
    assert abs(n - 23e6) / 23e6 <= 0.05


def test_single_layer_lstm_count_formula():
    V, E, H = 11, 5, 5
    cfg = ModelConfig(architecture="ERS", recurrence="LSTM", vocab_size=V, embedding_units=E, recurrent_units=H)
    assert param_count(cfg) == V * E + 4 * (H * E + H * H + H) + V


def test_untying_adds_output_matrix():
    cfg = small(architecture="ERS")
    assert param_count(cfg.replace(tie_weights=False)) - param_count(cfg) == 7 * 3


@given(
    st.sampled_from(["ERS", "Dual"]),
    st.sampled_from(["LSTM", "dLSTM", "mdLSTM"]),
    st.integers(0, 4),
    st.integers(0, 2),
    st.booleans(),
    st.booleans(),
)
@settings(max_examples=40)
def test_count_matches_allocation(arch, rec, rounds, rank, tie, bias):
    cfg = ModelConfig(
        architecture=arch, recurrence=rec, vocab_size=9, embedding_units=4, recurrent_units=4, dual_units=4,
        mogrifier_rounds=rounds, mogrifier_rank=rank, tie_weights=tie, mogrifier_bias=bias,
    )
    store, _ = build(cfg)
    assert store.count() == param_count(cfg)


# --- forward ---------------------------------------------------------------------


def test_zero_model_predicts_uniform():
    cfg = small(init="zero", recurrence="mdLSTM", mogrifier_rounds=2)
    _, model = build(cfg)
    probs, _ = model.forward_window(ids(np.random.default_rng(0), 7, 2, 5), model.zero_state(2))
    np.testing.assert_allclose(probs, 1 / 7, rtol=1e-12)


def test_uniform_loss_is_log_vocab():
    _, model = build(small(init="zero", vocab_size=13))
    rng = np.random.default_rng(1)
    x, y = ids(rng, 13, 3, 4), ids(rng, 13, 3, 4)
    fwd = model.run(x, model.zero_state(3))
    total, xent = model.loss(fwd, y)
    assert float(xent.data) == pytest.approx(math.log(13), rel=1e-12)
    assert math.exp(float(xent.data)) == pytest.approx(13, abs=1e-3)


def test_forward_shapes_and_normalisation():
    _, model = build(small(vocab_size=11, dtype="float32"))
    probs, state = model.forward_window(ids(np.random.default_rng(2), 11, 4, 6), model.zero_state(4))
    assert probs.shape == (4, 6, 11)
    np.testing.assert_allclose(probs.sum(-1), 1.0, atol=1e-6)
    assert state.batch_size == 4 and not state.h[0].requires_grad


def test_eval_output_ignores_dropout_rates():
    base = small(recurrence="mdLSTM", mogrifier_rounds=2)
    rates = {name: 0.5 for name in DROPOUT_FIELDS}
    _, a = build(base)
    _, b = build(base.replace(**rates))
    x = ids(np.random.default_rng(3), 7, 2, 4)
    pa, _ = a.forward_window(x, a.zero_state(2))
    before = b.rng.get_state()
    pb, _ = b.forward_window(x, b.zero_state(2))
    np.testing.assert_array_equal(pa, pb)
    assert b.rng.get_state() == before


def test_train_mode_dropout_changes_output():
    _, model = build(small(dropout_rec_output=0.5))
    x = ids(np.random.default_rng(3), 7, 2, 4)
    ev, _ = model.forward_window(x, model.zero_state(2))
    tr, _ = model.forward_window(x, model.zero_state(2), mode="train")
    assert not np.allclose(ev, tr)


def test_window_contiguity():
    cfg = small(recurrence="mdLSTM", mogrifier_rounds=2, vocab_size=9)
    _, model = build(cfg)
    x = ids(np.random.default_rng(4), 9, 2, 8)
    whole, _ = model.forward_window(x, model.zero_state(2))
    first, state = model.forward_window(x[:, :3], model.zero_state(2))
    second, _ = model.forward_window(x[:, 3:], state)
    assert max_rel_err(np.concatenate([first, second], axis=1), whole) < 1e-5


def test_batch_rows_are_independent():
    _, model = build(small(vocab_size=9))
    x = ids(np.random.default_rng(5), 9, 4, 5)
    perm = np.array([2, 0, 3, 1])
    p, _ = model.forward_window(x, model.zero_state(4))
    q, _ = model.forward_window(x[perm], model.zero_state(4))
    np.testing.assert_allclose(q, p[perm], rtol=1e-12)


def test_temperature_flattens_distribution():
    _, model = build(small(vocab_size=9))
    x = ids(np.random.default_rng(6), 9, 1, 3)
    cold, _ = model.forward_window(x, model.zero_state(1), temperature=0.5)
    hot, _ = model.forward_window(x, model.zero_state(1), temperature=50.0)
    assert cold.max() > hot.max()
    assert np.all(np.abs(hot - 1 / 9) < 0.02)


def test_state_mismatch_rejected():
    _, model = build(small(recurrence="dLSTM"))
    with pytest.raises(ValueError):
        model.run(np.zeros((2, 3), dtype=int), model.zero_state(3))
    _, single = build(small(recurrence="LSTM"))
    with pytest.raises(ValueError):
        model.run(np.zeros((2, 3), dtype=int), single.zero_state(2))


# --- loss and gradients -----------------------------------------------------------


def _model_fd(cfg, mode, seed=0, B=2, T=4):
    store, model = build(cfg)
    rng = np.random.default_rng(seed)
    x, y = ids(rng, cfg.vocab_size, B, T), ids(rng, cfg.vocab_size, B, T)
    state = model.zero_state(B)
    start = model.rng.get_state()
    store.zero_grad()
    model.backward_window(x, y, state, mode=mode)
    analytic = {n: p.grad.copy() for n, p in store.items()}

    def f():
        model.rng.set_state(start)
        with tn.no_grad():
            fwd = model.run(x, state, train=mode == "train")
            return float(model.loss(fwd, y)[0].data)

    return {n: max_rel_err(analytic[n], central_diff(f, p.data)) for n, p in store.items()}


L2_ALL = {name: 1e-2 for name in L2_FIELDS}


@pytest.mark.parametrize(
    "overrides",
    [
        dict(recurrence="mdLSTM", mogrifier_rounds=2, **L2_ALL),
        dict(recurrence="mdLSTM", mogrifier_rounds=3, mogrifier_rank=2, tie_weights=False, **L2_ALL),
        dict(architecture="ERS", recurrence="dLSTM", **L2_ALL),
        dict(recurrence="LSTM", l2_activation=0.1),
    ],
)
def test_whole_model_gradient(overrides):
    errs = _model_fd(small(**overrides), "eval")
    assert max(errs.values()) < 1e-4, {k: v for k, v in errs.items() if v >= 1e-4}


def test_whole_model_gradient_with_dropout():
    rates = {name: 0.3 for name in DROPOUT_FIELDS}
    errs = _model_fd(small(recurrence="mdLSTM", mogrifier_rounds=2, **rates, **L2_ALL), "train", seed=2)
    assert max(errs.values()) < 1e-4, {k: v for k, v in errs.items() if v >= 1e-4}


def test_zero_l2_loss_is_pure_cross_entropy():
    _, model = build(small(recurrence="mdLSTM", mogrifier_rounds=2))
    rng = np.random.default_rng(7)
    x, y = ids(rng, 7, 2, 3), ids(rng, 7, 2, 3)
    fwd = model.run(x, model.zero_state(2))
    total, xent = model.loss(fwd, y)
    assert model.regularizer(fwd) is None
    assert float(total.data) == float(xent.data)


def test_l2_term_values():
    cfg = small(architecture="ERS", l2_embedding=0.5)
    store, model = build(cfg)
    fwd = model.run(np.zeros((1, 1), dtype=int), model.zero_state(1))
    reg = float(model.regularizer(fwd).data)
    assert reg == pytest.approx(0.5 * np.sum(store["embedding.W_ex"].data ** 2), rel=1e-12)
    # tied output shares the embedding term, untied adds its own
    store2, model2 = build(cfg.replace(tie_weights=False))
    fwd2 = model2.run(np.zeros((1, 1), dtype=int), model2.zero_state(1))
    expect = 0.5 * (np.sum(store2["embedding.W_ex"].data ** 2) + np.sum(store2["output.W_y"].data ** 2))
    assert float(model2.regularizer(fwd2).data) == pytest.approx(expect, rel=1e-12)


def test_activation_penalty_value():
    _, model = build(small(recurrence="LSTM", l2_activation=0.25))
    fwd = model.run(np.array([[1, 2, 3], [4, 5, 6]]), model.zero_state(2))
    tops = np.stack([h.data for h in fwd.top])
    assert float(model.regularizer(fwd).data) == pytest.approx(0.25 * np.sum(tops**2) / 6, rel=1e-12)


def test_window_state_is_detached():
    store, model = build(small())
    rng = np.random.default_rng(8)
    out = model.backward_window(ids(rng, 7, 1, 3), ids(rng, 7, 1, 3), model.zero_state(1))
    assert all(not h.requires_grad and h._parents == () for h in out.state.h + out.state.c)
    store.zero_grad()
    x2, y2 = ids(rng, 7, 1, 3), ids(rng, 7, 1, 3)
    model.backward_window(x2, y2, out.state)
    carried = {n: p.grad.copy() for n, p in store.items()}
    store.zero_grad()
    fresh_state = type(out.state)([tn.Tensor(h.data.copy()) for h in out.state.h], [tn.Tensor(c.data.copy()) for c in out.state.c])
    model.backward_window(x2, y2, fresh_state)
    for n, p in store.items():
        np.testing.assert_array_equal(p.grad, carried[n])


def test_nonfinite_loss_raises():
    store, model = build(small())
    store["output.b_y"].data[0] = np.nan
    with pytest.raises(NonFiniteError):
        model.backward_window(np.zeros((1, 2), dtype=int), np.zeros((1, 2), dtype=int), model.zero_state(1))


# --- checkpoints --------------------------------------------------------------------


def test_checkpoint_roundtrip(tmp_path):
    cfg = small(recurrence="mdLSTM", mogrifier_rounds=2, dropout_rec=0.2, dtype="float32")
    _, model = build(cfg)
    model.rng.random(17)
    ckpt = Checkpoint.from_model(model, epoch=3, vocab=["a", "b"])
    path = tmp_path / "m.bin"
    ckpt.save(path)
    assert path.read_bytes().startswith(CHECKPOINT_MAGIC)
    back = Checkpoint.load(path)
    assert back.config == cfg and back.meta == {"epoch": 3, "vocab": ["a", "b"]}
    for name, arr in ckpt.params.items():
        assert back.params[name].dtype == arr.dtype
        np.testing.assert_array_equal(back.params[name], arr)
    restored = back.restore()
    np.testing.assert_array_equal(restored.rng.random(4), model.rng.random(4))
    x = np.array([[1, 2, 3]])
    np.testing.assert_array_equal(
        restored.forward_window(x, restored.zero_state(1))[0], model.forward_window(x, model.zero_state(1))[0]
    )


def test_checkpoint_rejects_bad_magic_and_version(tmp_path):
    _, model = build(small())
    path = tmp_path / "m.bin"
    Checkpoint.from_model(model).save(path)
    raw = path.read_bytes()
    (tmp_path / "bad.bin").write_bytes(b"NOTACKPT" + raw[8:])
    with pytest.raises(ValueError, match="not a checkpoint"):
        Checkpoint.load(tmp_path / "bad.bin")
    ckpt = Checkpoint.from_model(model)
    ckpt.version = 99
    ckpt.save(tmp_path / "v99.bin")
    with pytest.raises(ValueError, match="version"):
        Checkpoint.load(tmp_path / "v99.bin")


def test_load_rejects_mismatched_parameters():
    store, _ = build(small())
    snap = store.snapshot()
    snap.pop("output.b_y")
    with pytest.raises(KeyError):
        store.load(snap)

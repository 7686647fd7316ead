"""Central finite-difference checks of every layer's analytic gradient (float64)."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import tensor as tn
from .layers import (
    DualHeadParams,
    EmbeddingParams,
    LstmParams,
    MogrifierParams,
    MogrifierRound,
    OutputParams,
    RecurrentState,
    dual_head,
    embed,
    lstm_cell,
    mogrify,
    project_logits,
    recurrence_step,
)
from .model import ModelConfig, build
from .tensor import Tensor

STEP = 1e-5
TOLERANCE = 1e-4
# elements whose true derivative is below this are compared absolutely
REL_FLOOR = 1e-6


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = REL_FLOOR) -> float:
    """Max elementwise ``|a - n| / max(|a|, |n|, floor)``."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom))


def numeric_gradient(f: Callable[[], float], x: np.ndarray, h: float = STEP) -> np.ndarray:
    """Central differences of scalar ``f`` w.r.t. ``x``, perturbing ``x`` in place."""
    grad = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = f()
        flat[i] = orig - h
        down = f()
        flat[i] = orig
        grad.reshape(-1)[i] = (up - down) / (2 * h)
    return grad


def check_function(
    fn: Callable[[], Sequence[Tensor]],
    leaves: dict[str, Tensor],
    seed: int = 0,
    h: float = STEP,
) -> dict[str, float]:
    """Compare backprop against finite differences for ``sum_k <fn()_k, R_k>``.

    ``R_k`` are fixed random projections, so every output element matters.
    Returns the max relative error per leaf.
    """
    rng = np.random.default_rng(seed)
    for t in leaves.values():
        t.requires_grad = True
        t.grad = None
    outs = fn()
    weights = [rng.standard_normal(o.shape) for o in outs]
    objective = tn.add_scalars([tn.weighted_sum(o, w) for o, w in zip(outs, weights)])
    tn.backward(objective)
    analytic = {k: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data)) for k, t in leaves.items()}

    def f():
        with tn.no_grad():
            return float(sum(np.sum(o.data * w) for o, w in zip(fn(), weights)))

    return {k: relative_error(analytic[k], numeric_gradient(f, t.data, h)) for k, t in leaves.items()}


def _rand(rng, *shape, scale=1.0) -> Tensor:
    return Tensor(rng.uniform(-scale, scale, shape), dtype=np.float64)


def _lstm_params(rng, E, H) -> LstmParams:
    kw = {}
    for g in "fioz":
        kw[f"W_{g}e"] = _rand(rng, H, E)
        kw[f"W_{g}h"] = _rand(rng, H, H)
        kw[f"b_{g}"] = _rand(rng, H)
    return LstmParams(**kw)


def _mog_params(rng, dim, rounds, rank, bias=True) -> MogrifierParams:
    out = []
    for _ in range(rounds):
        b = _rand(rng, dim) if bias else None
        if rank:
            out.append(MogrifierRound(left=_rand(rng, dim, rank), right=_rand(rng, rank, dim), bias=b))
        else:
            out.append(MogrifierRound(full=_rand(rng, dim, dim), bias=b))
    return MogrifierParams(out)


def _leaves(obj, prefix: str) -> dict[str, Tensor]:
    if isinstance(obj, MogrifierParams):
        d = {}
        for i, r in enumerate(obj.rounds):
            d.update(_leaves(r, f"{prefix}.{i + 1}"))
        return d
    return {f"{prefix}.{k}": v for k, v in vars(obj).items() if isinstance(v, Tensor)}


# ---------------------------------------------------------------------------
# the individual checks; each returns {leaf: max relative error}


def check_matmul(seed=0):
    rng = np.random.default_rng(seed)
    A, B = _rand(rng, 3, 4), _rand(rng, 4, 2)
    return check_function(lambda: [tn.matmul(A, B)], {"A": A, "B": B}, seed)


def check_pointwise(seed=0):
    rng = np.random.default_rng(seed)
    a, b, bias = _rand(rng, 3, 4), _rand(rng, 3, 4), _rand(rng, 4)
    # keep relu inputs off the kink
    r = Tensor(np.where(np.abs(a.data) < 0.05, 0.3, a.data), dtype=np.float64)
    res = {}
    for kind in ("sigmoid", "tanh"):
        res.update({f"{kind}.{k}": v for k, v in check_function(lambda: [tn.pointwise(kind, a)], {"a": a}, seed).items()})
    res.update({f"relu.{k}": v for k, v in check_function(lambda: [tn.relu(r)], {"a": r}, seed).items()})
    res.update({f"mul.{k}": v for k, v in check_function(lambda: [tn.mul(a, b)], {"a": a, "b": b}, seed).items()})
    res.update({f"add.{k}": v for k, v in check_function(lambda: [tn.add(a, bias)], {"a": a, "bias": bias}, seed).items()})
    return res


def check_softmax_xent(seed=0):
    rng = np.random.default_rng(seed)
    z = _rand(rng, 5, 4, scale=2.0)
    y = rng.integers(4, size=5)
    return check_function(lambda: [tn.softmax_cross_entropy(z, y, 1.3)], {"logits": z}, seed)


def check_embed(seed=0):
    rng = np.random.default_rng(seed)
    p = EmbeddingParams(_rand(rng, 5, 3))
    ids = np.array([0, 2, 2, 4])
    return check_function(lambda: [embed(ids, p)], {"W_ex": p.W_ex}, seed)


def check_lstm_cell(seed=0, B=2, E=2, H=3):
    rng = np.random.default_rng(seed)
    p = _lstm_params(rng, E, H)
    e, h, c = _rand(rng, B, E), _rand(rng, B, H), _rand(rng, B, H)
    leaves = {"e": e, "h_prev": h, "c_prev": c, **_leaves(p, "cell")}
    return check_function(lambda: list(lstm_cell(e, h, c, p)), leaves, seed)


def check_mogrify(rounds=2, rank=0, seed=0, B=2, dim=3):
    rng = np.random.default_rng(seed)
    p = _mog_params(rng, dim, rounds, rank)
    e, h = _rand(rng, B, dim), _rand(rng, B, dim)
    leaves = {"e": e, "h_prev": h, **_leaves(p, "mog")}
    return check_function(lambda: list(mogrify(e, h, p)), leaves, seed)


def check_dual_head(seed=0, B=3, E=3, H=2, D=4):
    rng = np.random.default_rng(seed)
    p = DualHeadParams(_rand(rng, D, E), _rand(rng, D, H), _rand(rng, D))
    e, h = _rand(rng, B, E), _rand(rng, B, H)
    pre = e.data @ p.W_de.data.T + h.data @ p.W_dh.data.T + p.b_d.data
    # nudge pre-activations away from the ReLU kink so differences stay one-sided
    p.b_d.data += np.where(np.abs(pre) < 0.05, 0.2, 0.0).max(axis=0)
    leaves = {"e": e, "h": h, **_leaves(p, "dual")}
    return check_function(lambda: [dual_head(e, h, p)], leaves, seed)


def check_project_logits(tied: bool, seed=0, V=5, E=3):
    rng = np.random.default_rng(seed)
    W_ex = _rand(rng, V, E)
    b_y = _rand(rng, V)
    ids = np.array([1, 3, 3])
    if tied:
        out = OutputParams(W_ex, b_y, tied=True)
        leaves = {"W_ex": W_ex, "b_y": b_y}
    else:
        out = OutputParams(_rand(rng, V, E), b_y)
        leaves = {"W_ex": W_ex, "W_y": out.W_y, "b_y": b_y}
    emb = EmbeddingParams(W_ex)
    return check_function(lambda: [project_logits(embed(ids, emb), out)], leaves, seed)


def check_recurrence(kind="dLSTM", steps=3, seed=0, B=1, H=2, rounds=2):
    """BPTT through ``steps`` timesteps of a stacked recurrence."""
    rng = np.random.default_rng(seed)
    layers = 1 if kind == "LSTM" else 2
    cells = [_lstm_params(rng, H, H) for _ in range(layers)]
    mogs = [_mog_params(rng, H, rounds, 0) for _ in range(layers)] if kind == "mdLSTM" else None
    xs = [_rand(rng, B, H) for _ in range(steps)]
    h0 = [_rand(rng, B, H) for _ in range(layers)]
    c0 = [_rand(rng, B, H) for _ in range(layers)]
    leaves = {f"x{t}": x for t, x in enumerate(xs)}
    for i, c in enumerate(cells):
        leaves.update(_leaves(c, f"rec.{i}"))
    for i, m in enumerate(mogs or []):
        leaves.update(_leaves(m, f"mog.{i}"))
    leaves.update({f"h0.{i}": t for i, t in enumerate(h0)})
    leaves.update({f"c0.{i}": t for i, t in enumerate(c0)})

    def fn():
        state = RecurrentState(list(h0), list(c0))
        outs = []
        for x in xs:
            h, state = recurrence_step(kind, x, state, cells, mogs)
            outs.append(h)
        return outs + state.c

    return check_function(fn, leaves, seed)


def tiny_config(**overrides) -> ModelConfig:
    """The Dual mdLSTM used for whole-model checks: V=7, E=H=D=3, r=2."""
    base = dict(
        architecture="Dual",
        recurrence="mdLSTM",
        vocab_size=7,
        embedding_units=3,
        recurrent_units=3,
        dual_units=3,
        mogrifier_rounds=2,
        tie_weights=True,
        dtype="float64",
        seed=3,
        l2_embedding=1e-3,
        l2_rec_input=1e-3,
        l2_rec=1e-3,
        l2_activation=1e-2,
        l2_dual=1e-3,
        l2_mogrifier=1e-3,
    )
    base.update(overrides)
    return ModelConfig(**base)


def check_model(config: ModelConfig | None = None, B=2, T=4, seed=0, mode="eval") -> dict[str, float]:
    """Full backward_window (cross-entropy + every L2 term) against finite differences.

    In train mode the dropout RNG is rewound before every evaluation so the
    same masks are used throughout.
    """
    cfg = config or tiny_config()
    store, model = build(cfg)
    rng = np.random.default_rng(seed)
    # lift weights off the symmetric init so every gate is exercised
    for _, p in store.items():
        p.data[...] = rng.uniform(-0.8, 0.8, p.shape)
    x = rng.integers(cfg.vocab_size, size=(B, T))
    y = rng.integers(cfg.vocab_size, size=(B, T))
    state0 = RecurrentState(
        [Tensor(rng.uniform(-0.5, 0.5, (B, cfg.recurrent_units))) for _ in range(cfg.layers)],
        [Tensor(rng.uniform(-0.5, 0.5, (B, cfg.recurrent_units))) for _ in range(cfg.layers)],
    )
    rng_state = model.rng.get_state()

    store.zero_grad()
    model.backward_window(x, y, state0, mode=mode)
    analytic = {k: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data)) for k, p in store.items()}

    def f():
        model.rng.set_state(rng_state)
        with tn.no_grad():
            fwd = model.run(x, state0, train=mode == "train")
            total, _ = model.loss(fwd, y)
        return float(total.data)

    out = {}
    for k, p in store.items():
        model.rng.set_state(rng_state)
        out[k] = relative_error(analytic[k], numeric_gradient(f, p.data))
    return out


@dataclass
class GradCheckRow:
    name: str
    max_rel_error: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < TOLERANCE


def run_suite(seed: int = 0, config: ModelConfig | None = None) -> list[GradCheckRow]:
    """Every layer check plus the whole-model check; one row per check."""
    checks = [
        ("matmul", lambda: check_matmul(seed)),
        ("pointwise", lambda: check_pointwise(seed)),
        ("softmax_xent", lambda: check_softmax_xent(seed)),
        ("embed", lambda: check_embed(seed)),
        ("lstm_cell", lambda: check_lstm_cell(seed)),
        ("mogrify r=2", lambda: check_mogrify(2, 0, seed)),
        ("mogrify r=4", lambda: check_mogrify(4, 0, seed)),
        ("mogrify r=2 rank=2", lambda: check_mogrify(2, 2, seed)),
        ("mogrify r=4 rank=2", lambda: check_mogrify(4, 2, seed)),
        ("recurrence LSTM", lambda: check_recurrence("LSTM", seed=seed)),
        ("recurrence dLSTM", lambda: check_recurrence("dLSTM", seed=seed)),
        ("recurrence mdLSTM", lambda: check_recurrence("mdLSTM", seed=seed)),
        ("dual_head", lambda: check_dual_head(seed)),
        ("project_logits tied", lambda: check_project_logits(True, seed)),
        ("project_logits untied", lambda: check_project_logits(False, seed)),
        ("backward_window", lambda: check_model(config, seed=seed)),
        ("backward_window train-mode dropout", lambda: check_model(
            (config or tiny_config()).replace(
                dropout_rec_input=0.2, dropout_rec=0.2, dropout_rec_internal=0.2, dropout_rec_output=0.2,
                dropout_dual_input=0.2, dropout_dual_output=0.2, dropout_mogrifier=0.1,
            ),
            seed=seed,
            mode="train",
        )),
    ]
    return [GradCheckRow(name, max(fn().values())) for name, fn in checks]


def format_rows(rows: Sequence[GradCheckRow]) -> str:
    width = max(len(r.name) for r in rows)
    lines = [f"{'check':<{width}}  {'max_rel_err':>12}  result"]
    for r in rows:
        lines.append(f"{r.name:<{width}}  {r.max_rel_error:12.3e}  {'pass' if r.passed else 'FAIL'}")
    return "\n".join(lines)

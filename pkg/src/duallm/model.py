"""ERS and dual network assembly, windowed forward/backward, parameter counting."""

from __future__ import annotations

import dataclasses
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, NamedTuple

import numpy as np

from . import tensor as tn
from .layers import (
    RECURRENCES,
    DropoutContext,
    DualHeadParams,
    EmbeddingParams,
    LstmParams,
    MogrifierParams,
    MogrifierRound,
    OutputParams,
    RecurrentState,
    dual_head,
    embed,
    project_logits,
    recurrence_step,
)
from .tensor import NonFiniteError, RngStream, Tensor

ARCHITECTURES = ("ERS", "Dual")

DROPOUT_FIELDS = (
    "dropout_rec_input",
    "dropout_rec",
    "dropout_rec_internal",
    "dropout_rec_output",
    "dropout_dual_input",
    "dropout_dual_output",
    "dropout_mogrifier",
)
L2_FIELDS = ("l2_embedding", "l2_rec_input", "l2_rec", "l2_activation", "l2_dual", "l2_mogrifier")


class ConfigError(ValueError):
    """A model or run configuration violates its constraints."""

    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


@dataclass
class ModelConfig:
    architecture: str = "Dual"
    recurrence: str = "LSTM"
    vocab_size: int = 0
    embedding_units: int = 400
    recurrent_units: int = 400
    # 0 derives the depth from the recurrence: 1 for LSTM, 2 otherwise
    lstm_layers: int = 0
    dual_units: int = 400
    tie_weights: bool = True
    mogrifier_rounds: int = 0
    mogrifier_rank: int = 0
    mogrifier_bias: bool = True
    dropout_rec_input: float = 0.0
    dropout_rec: float = 0.0
    dropout_rec_internal: float = 0.0
    dropout_rec_output: float = 0.0
    dropout_dual_input: float = 0.0
    dropout_dual_output: float = 0.0
    dropout_mogrifier: float = 0.0
    l2_embedding: float = 0.0
    l2_rec_input: float = 0.0
    l2_rec: float = 0.0
    l2_activation: float = 0.0
    l2_dual: float = 0.0
    l2_mogrifier: float = 0.0
    seed: int = 0
    init: str = "uniform"
    dtype: str = "float32"

    @property
    def layers(self) -> int:
        if self.lstm_layers:
            return self.lstm_layers
        return 1 if self.recurrence == "LSTM" else 2

    @property
    def is_dual(self) -> bool:
        return self.architecture == "Dual"

    @property
    def mogrified(self) -> bool:
        return self.recurrence == "mdLSTM"

    @property
    def head_width(self) -> int:
        return self.dual_units if self.is_dual else self.recurrent_units

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    def validate(self) -> ModelConfig:
        if self.architecture not in ARCHITECTURES:
            raise ConfigError("architecture", f"expected one of {ARCHITECTURES}, got {self.architecture!r}")
        if self.recurrence not in RECURRENCES:
            raise ConfigError("recurrence", f"expected one of {RECURRENCES}, got {self.recurrence!r}")
        if self.vocab_size < 1:
            raise ConfigError("vocab_size", f"must be positive, got {self.vocab_size}")
        for name in ("embedding_units", "recurrent_units", "dual_units"):
            if getattr(self, name) < 1:
                raise ConfigError(name, f"must be positive, got {getattr(self, name)}")
        if self.lstm_layers not in (0, 1, 2, 3):
            raise ConfigError("lstm_layers", f"must be 1, 2 or 3 (0 = derive), got {self.lstm_layers}")
        if self.recurrence == "LSTM" and self.layers != 1:
            raise ConfigError("lstm_layers", "the LSTM recurrence is a single layer; use dLSTM or mdLSTM for stacks")
        if self.recurrence != "LSTM" and self.layers < 2:
            raise ConfigError("lstm_layers", f"{self.recurrence} needs at least two layers")
        if self.mogrifier_rounds < 0:
            raise ConfigError("mogrifier_rounds", f"must be non-negative, got {self.mogrifier_rounds}")
        if self.mogrifier_rank < 0:
            raise ConfigError("mogrifier_rank", f"must be non-negative, got {self.mogrifier_rank}")
        if self.mogrified and self.mogrifier_rounds > 0 and self.embedding_units != self.recurrent_units:
            raise ConfigError(
                "embedding_units",
                f"mogrified layers need embedding_units == recurrent_units, got "
                f"{self.embedding_units} and {self.recurrent_units}",
            )
        for name in DROPOUT_FIELDS:
            rate = getattr(self, name)
            if not 0 <= rate < 1:
                raise ConfigError(name, f"dropout rate must lie in [0, 1), got {rate}")
        for name in L2_FIELDS:
            if getattr(self, name) < 0:
                raise ConfigError(name, f"L2 coefficient must be >= 0, got {getattr(self, name)}")
        if self.tie_weights:
            if self.is_dual and self.dual_units != self.embedding_units:
                raise ConfigError(
                    "dual_units",
                    f"tied Dual model needs dual_units == embedding_units, got {self.dual_units} "
                    f"and {self.embedding_units}",
                )
            if not self.is_dual and self.recurrent_units != self.embedding_units:
                raise ConfigError(
                    "recurrent_units",
                    f"tied ERS model needs recurrent_units == embedding_units, got "
                    f"{self.recurrent_units} and {self.embedding_units}",
                )
        if self.init not in ("uniform", "zero"):
            raise ConfigError("init", f"expected 'uniform' or 'zero', got {self.init!r}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype", f"expected 'float32' or 'float64', got {self.dtype!r}")
        return self

    def replace(self, **changes) -> ModelConfig:
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(sorted(unknown)[0], "unknown model config field")
        return cls(**d)


class ParamStore:
    """Ordered name -> parameter registry with tying aliases.

    Iteration yields each storage once, in insertion order; aliases resolve
    through ``store[name]`` but are never iterated or counted.
    """

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self.aliases: dict[str, str] = {}

    def add(self, name: str, value: Tensor) -> Tensor:
        if name in self._params or name in self.aliases:
            raise KeyError(f"duplicate parameter name {name!r}")
        value.requires_grad = True
        value.name = name
        self._params[name] = value
        return value

    def tie(self, alias: str, target: str) -> Tensor:
        if target not in self._params:
            raise KeyError(f"cannot alias unknown parameter {target!r}")
        self.aliases[alias] = target
        return self._params[target]

    def resolve(self, name: str) -> str:
        return self.aliases.get(name, name)

    def __getitem__(self, name: str) -> Tensor:
        return self._params[self.resolve(name)]

    def __contains__(self, name: str) -> bool:
        return name in self._params or name in self.aliases

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def names(self, include_aliases: bool = False) -> list[str]:
        out = list(self._params)
        if include_aliases:
            out += list(self.aliases)
        return out

    def items(self):
        return self._params.items()

    def count(self) -> int:
        return sum(int(p.data.size) for p in self._params.values())

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.grad = None

    def grads(self) -> list[np.ndarray]:
        return [p.grad for p in self._params.values() if p.grad is not None]

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self._params.items()}

    def load(self, values: dict[str, np.ndarray]) -> None:
        if set(values) != set(self._params):
            missing = set(self._params) ^ set(values)
            raise KeyError(f"parameter set mismatch: {sorted(missing)[:5]}")
        for k, p in self._params.items():
            v = np.asarray(values[k])
            if v.shape != p.data.shape:
                raise ValueError(f"{k}: shape {v.shape} does not match {p.data.shape}")
            p.data[...] = v


class Forward(NamedTuple):
    logits: Tensor  # [(T*B) x V], time-major rows
    top: list[Tensor]  # top-layer h per timestep, before output dropout
    state: RecurrentState


class WindowLoss(NamedTuple):
    loss: float
    xent: float
    state: RecurrentState


class Model:
    """A built network; see :func:`build`."""

    def __init__(
        self,
        config: ModelConfig,
        params: ParamStore,
        embedding: EmbeddingParams,
        cells: list[LstmParams],
        mogrifiers: list[MogrifierParams] | None,
        dual: DualHeadParams | None,
        output: OutputParams,
        rng: RngStream,
    ):
        self.config = config
        self.params = params
        self.embedding = embedding
        self.cells = cells
        self.mogrifiers = mogrifiers
        self.dual = dual
        self.output = output
        self.rng = rng

    @property
    def dtype(self):
        return self.config.np_dtype

    def zero_state(self, batch_size: int) -> RecurrentState:
        return RecurrentState.zeros(self.config.layers, batch_size, self.config.recurrent_units, self.dtype)

    def _check_state(self, state: RecurrentState, batch: int) -> None:
        H = self.config.recurrent_units
        if state.layers != self.config.layers:
            raise ValueError(f"state has {state.layers} layer(s), model has {self.config.layers}")
        for h, c in zip(state.h, state.c):
            if h.shape != (batch, H) or c.shape != (batch, H):
                raise ValueError(f"state tensors {h.shape}/{c.shape} do not match batch {batch}, hidden {H}")

    def _mask(self, shape, rate: float) -> Tensor | None:
        if rate == 0:
            return None
        return tn.dropout_mask(shape, rate, self.rng, self.dtype)

    def run(self, x: np.ndarray, state: RecurrentState, train: bool = False) -> Forward:
        """Unroll the network over a ``B x T`` window of token ids."""
        cfg = self.config
        x = np.asarray(x)
        if x.ndim != 2 or x.shape[1] < 1:
            raise ValueError(f"expected a B x T id matrix with T >= 1, got shape {x.shape}")
        B, T = x.shape
        self._check_state(state, B)
        H = cfg.recurrent_units
        rate = (lambda name: getattr(cfg, name)) if train else (lambda name: 0.0)

        ctx = DropoutContext(recurrent=[self._mask((B, H), rate("dropout_rec")) for _ in self.cells])
        if self.mogrifiers is not None:
            ctx.mogrifier = [
                [
                    self._mask((B, cfg.recurrent_units if i % 2 == 0 else cfg.embedding_units), rate("dropout_mogrifier"))
                    for i in range(m.r)
                ]
                for m in self.mogrifiers
            ]

        logits, tops = [], []
        for t in range(T):
            e = embed(x[:, t], self.embedding)
            m = self._mask(e.shape, rate("dropout_rec_input"))
            e_rec = e if m is None else tn.mul(e, m)
            ctx.internal = [self._mask((B, H), rate("dropout_rec_internal")) for _ in self.cells[1:]]
            h, state = recurrence_step(cfg.recurrence, e_rec, state, self.cells, self.mogrifiers, ctx)
            tops.append(h)
            m = self._mask(h.shape, rate("dropout_rec_output"))
            out = h if m is None else tn.mul(h, m)
            if self.dual is not None:
                m = self._mask(e.shape, rate("dropout_dual_input"))
                e_d = e if m is None else tn.mul(e, m)
                m = self._mask(out.shape, rate("dropout_dual_input"))
                h_d = out if m is None else tn.mul(out, m)
                out = dual_head(e_d, h_d, self.dual)
                m = self._mask(out.shape, rate("dropout_dual_output"))
                out = out if m is None else tn.mul(out, m)
            logits.append(project_logits(out, self.output))
        stacked = tn.concat_rows(logits)
        tn.check_finite(stacked, "logits")
        return Forward(stacked, tops, state)

    def forward_window(
        self, x: np.ndarray, state: RecurrentState, mode: str = "eval", temperature: float = 1.0
    ) -> tuple[np.ndarray, RecurrentState]:
        """Return next-token probabilities ``[B x T x V]`` and the carried state.

        Temperature only applies in eval mode; training always uses 1.
        """
        if mode not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
        with tn.no_grad():
            fwd = self.run(x, state, train=mode == "train")
        B, T = np.shape(x)
        probs = tn.softmax_rows(fwd.logits.data, temperature if mode == "eval" else 1.0)
        return probs.reshape(T, B, -1).transpose(1, 0, 2), fwd.state.detach()

    def regularizer(self, fwd: Forward) -> Tensor | None:
        cfg = self.config
        terms = []

        def l2(coef, tensors):
            if coef > 0:
                for t in tensors:
                    terms.append(tn.scale(tn.sum_squares(t), coef))

        out_w = [] if self.output.tied else [self.output.W_y]
        l2(cfg.l2_embedding, [self.embedding.W_ex] + out_w)
        l2(cfg.l2_rec_input, [getattr(c, f"W_{g}e") for c in self.cells for g in "fioz"])
        l2(cfg.l2_rec, [getattr(c, f"W_{g}h") for c in self.cells for g in "fioz"])
        if self.dual is not None:
            l2(cfg.l2_dual, [self.dual.W_de, self.dual.W_dh])
        if self.mogrifiers is not None:
            mats = [
                w
                for m in self.mogrifiers
                for rnd in m.rounds
                for w in (rnd.full, rnd.left, rnd.right)
                if w is not None
            ]
            l2(cfg.l2_mogrifier, mats)
        if cfg.l2_activation > 0 and fwd.top:
            n = fwd.top[0].shape[0] * len(fwd.top)
            act = tn.add_scalars([tn.sum_squares(h) for h in fwd.top])
            terms.append(tn.scale(act, cfg.l2_activation / n))
        return tn.add_scalars(terms) if terms else None

    def loss(self, fwd: Forward, y: np.ndarray, regularize: bool = True) -> tuple[Tensor, Tensor]:
        """Return ``(total, cross_entropy)`` for targets ``y`` of shape ``B x T``."""
        targets = np.asarray(y).T.reshape(-1)
        xent = tn.softmax_cross_entropy(fwd.logits, targets)
        reg = self.regularizer(fwd) if regularize else None
        total = xent if reg is None else tn.add_scalars([xent, reg])
        return total, xent

    def backward_window(
        self, x: np.ndarray, y: np.ndarray, state: RecurrentState, mode: str = "train"
    ) -> WindowLoss:
        """Truncated BPTT over one window.

        Gradients accumulate into the parameter store; the returned state is
        detached so no gradient crosses into the next window.
        """
        if np.shape(x) != np.shape(y):
            raise ValueError(f"x {np.shape(x)} and targets {np.shape(y)} differ in shape")
        fwd = self.run(x, state, train=mode == "train")
        total, xent = self.loss(fwd, y)
        value = float(total.data)
        if not math.isfinite(value):
            raise NonFiniteError(f"loss is {value}")
        tn.backward(total)
        return WindowLoss(value, float(xent.data), fwd.state.detach())


# ---------------------------------------------------------------------------
# construction


def _init(store: ParamStore, rng: RngStream, cfg: ModelConfig, name: str, shape, bound: float, fill: float = 0.0):
    dt = cfg.np_dtype
    if cfg.init == "zero":
        data = np.zeros(shape, dtype=dt)
    elif bound > 0:
        data = rng.uniform(-bound, bound, shape).astype(dt)
    else:
        data = np.full(shape, fill, dtype=dt)
    return store.add(name, Tensor(data, dtype=dt))


def _mogrifier_shapes(cfg: ModelConfig) -> list[tuple[str, tuple[int, int]]]:
    """(suffix, shape) for every weight of one mogrified layer."""
    E, H, k = cfg.embedding_units, cfg.recurrent_units, cfg.mogrifier_rank
    shapes = []
    for i in range(1, cfg.mogrifier_rounds + 1):
        # odd rounds map h -> e-space (Q), even rounds e -> h-space (R)
        sym, out_dim, in_dim = ("Q", E, H) if i % 2 else ("R", H, E)
        if k > 0:
            shapes.append((f"{i}.{sym}_l", (out_dim, k)))
            shapes.append((f"{i}.{sym}_r", (k, in_dim)))
        else:
            shapes.append((f"{i}.{sym}", (out_dim, in_dim)))
        if cfg.mogrifier_bias:
            shapes.append((f"{i}.b", (out_dim,)))
    return shapes


def build(config: ModelConfig, rng: RngStream | None = None) -> tuple[ParamStore, Model]:
    """Allocate and initialise every parameter and wire up the network."""
    cfg = config.validate()
    rng = rng or RngStream(cfg.seed, 0)
    V, E, H, D = cfg.vocab_size, cfg.embedding_units, cfg.recurrent_units, cfg.dual_units
    store = ParamStore()

    embedding = EmbeddingParams(_init(store, rng, cfg, "embedding.W_ex", (V, E), 1 / math.sqrt(E)))

    cells, mogrifiers = [], [] if cfg.mogrified else None
    bound = 1 / math.sqrt(H)
    for layer in range(cfg.layers):
        in_dim = E if layer == 0 else H
        pre = f"rec.{layer}"
        if mogrifiers is not None:
            rounds, w = [], {}
            for suffix, shape in _mogrifier_shapes(cfg):
                w[suffix] = _init(store, rng, cfg, f"{pre}.mog.{suffix}", shape, bound)
            for i in range(1, cfg.mogrifier_rounds + 1):
                sym = "Q" if i % 2 else "R"
                rounds.append(
                    MogrifierRound(
                        full=w.get(f"{i}.{sym}"),
                        left=w.get(f"{i}.{sym}_l"),
                        right=w.get(f"{i}.{sym}_r"),
                        bias=w.get(f"{i}.b"),
                    )
                )
            mogrifiers.append(MogrifierParams(rounds))
        gates = {}
        for g in "fioz":
            gates[f"W_{g}e"] = _init(store, rng, cfg, f"{pre}.W_{g}e", (H, in_dim), bound)
            gates[f"W_{g}h"] = _init(store, rng, cfg, f"{pre}.W_{g}h", (H, H), bound)
            gates[f"b_{g}"] = _init(store, rng, cfg, f"{pre}.b_{g}", (H,), 0.0, fill=1.0 if g == "f" else 0.0)
        cells.append(LstmParams(**gates))

    dual = None
    if cfg.is_dual:
        b = 1 / math.sqrt(D)
        dual = DualHeadParams(
            W_de=_init(store, rng, cfg, "dual.W_de", (D, E), b),
            W_dh=_init(store, rng, cfg, "dual.W_dh", (D, H), b),
            b_d=_init(store, rng, cfg, "dual.b_d", (D,), 0.0),
        )

    if cfg.tie_weights:
        W_y = store.tie("output.W_y", "embedding.W_ex")
    else:
        W_y = _init(store, rng, cfg, "output.W_y", (V, cfg.head_width), 1 / math.sqrt(cfg.head_width))
    output = OutputParams(W_y=W_y, b_y=_init(store, rng, cfg, "output.b_y", (V,), 0.0), tied=cfg.tie_weights)

    model = Model(cfg, store, embedding, cells, mogrifiers, dual, output, RngStream(cfg.seed, 1))
    return store, model


def param_count(config: ModelConfig) -> int:
    """Trainable scalars for ``config`` without allocating anything; tied storage counts once."""
    cfg = config.validate()
    V, E, H, D = cfg.vocab_size, cfg.embedding_units, cfg.recurrent_units, cfg.dual_units
    n = V * E + V
    for layer in range(cfg.layers):
        in_dim = E if layer == 0 else H
        n += 4 * (H * in_dim + H * H + H)
        if cfg.mogrified:
            n += sum(math.prod(shape) for _, shape in _mogrifier_shapes(cfg))
    if cfg.is_dual:
        n += D * E + D * H + D
    if not cfg.tie_weights:
        n += V * cfg.head_width
    return n


# ---------------------------------------------------------------------------
# checkpoints

CHECKPOINT_MAGIC = b"DUALLMCK"
CHECKPOINT_VERSION = 1


@dataclass
class Checkpoint:
    """Frozen parameters plus the config and dropout RNG state that produced them."""

    config: ModelConfig
    params: dict[str, np.ndarray]
    rng_state: dict | None = None
    version: int = CHECKPOINT_VERSION
    meta: dict = field(default_factory=dict)

    @classmethod
    def from_model(cls, model: Model, **meta) -> Checkpoint:
        return cls(model.config, model.params.snapshot(), model.rng.get_state(), meta=dict(meta))

    def restore(self) -> Model:
        _, model = build(self.config)
        model.params.load(self.params)
        if self.rng_state is not None:
            model.rng.set_state(self.rng_state)
        return model

    def save(self, path) -> None:
        header = {
            "version": self.version,
            "config": self.config.to_dict(),
            "rng_state": self.rng_state,
            "meta": self.meta,
            "params": [],
        }
        blobs, offset = [], 0
        for name, arr in self.params.items():
            raw = np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
            header["params"].append(
                {"name": name, "shape": list(arr.shape), "dtype": arr.dtype.name, "offset": offset, "nbytes": len(raw)}
            )
            blobs.append(raw)
            offset += len(raw)
        head = json.dumps(header, sort_keys=True).encode("utf-8")
        tmp = Path(str(path) + ".tmp")
        with open(tmp, "wb") as f:
            f.write(CHECKPOINT_MAGIC)
            f.write(struct.pack("<Q", len(head)))
            f.write(head)
            for raw in blobs:
                f.write(raw)
        tmp.replace(path)

    @classmethod
    def load(cls, path) -> Checkpoint:
        with open(path, "rb") as f:
            magic = f.read(len(CHECKPOINT_MAGIC))
            if magic != CHECKPOINT_MAGIC:
                raise ValueError(f"{path}: not a checkpoint file")
            (n,) = struct.unpack("<Q", f.read(8))
            header = json.loads(f.read(n).decode("utf-8"))
            body = f.read()
        if header.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {header.get('version')}")
        params = {}
        for entry in header["params"]:
            dt = np.dtype(entry["dtype"]).newbyteorder("<")
            raw = body[entry["offset"] : entry["offset"] + entry["nbytes"]]
            params[entry["name"]] = np.frombuffer(raw, dtype=dt).astype(entry["dtype"]).reshape(entry["shape"])
        return cls(
            ModelConfig.from_dict(header["config"]),
            params,
            header.get("rng_state"),
            header["version"],
            header.get("meta", {}),
        )

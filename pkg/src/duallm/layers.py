"""Embedding, LSTM cell, mogrifier, stacked recurrence, dual head and output map.

All activations are row-major: a batch of vectors is a ``B x dim`` matrix and
a weight ``W`` of shape ``[out x in]`` is applied as ``x @ W.T``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import (
    ShapeError,
    Tensor,
    add,
    gather_rows,
    matmul,
    mul,
    relu,
    scale,
    sigmoid,
    tanh,
    transpose,
)

RECURRENCES = ("LSTM", "dLSTM", "mdLSTM")


def linear(x: Tensor, W: Tensor, b: Tensor | None = None) -> Tensor:
    if x.shape[1] != W.shape[1]:
        raise ShapeError(f"input width {x.shape[1]} does not match weight {W.shape}")
    y = matmul(x, transpose(W))
    return y if b is None else add(y, b)


@dataclass
class EmbeddingParams:
    W_ex: Tensor  # [V x E]


@dataclass
class LstmParams:
    W_fe: Tensor
    W_fh: Tensor
    b_f: Tensor
    W_ie: Tensor
    W_ih: Tensor
    b_i: Tensor
    W_oe: Tensor
    W_oh: Tensor
    b_o: Tensor
    W_ze: Tensor
    W_zh: Tensor
    b_z: Tensor

    @property
    def input_size(self) -> int:
        return self.W_fe.shape[1]

    @property
    def hidden_size(self) -> int:
        return self.W_fh.shape[0]


@dataclass
class MogrifierRound:
    """One gating map: either a full matrix or a ``left @ right`` factor pair."""

    full: Tensor | None = None
    left: Tensor | None = None
    right: Tensor | None = None
    bias: Tensor | None = None

    def __post_init__(self):
        if (self.full is None) == (self.left is None or self.right is None):
            raise ValueError("a mogrifier round needs either a full matrix or both factors")

    def apply(self, x: Tensor) -> Tensor:
        if self.full is not None:
            return linear(x, self.full, self.bias)
        # Q x = Q_l (Q_r x)
        return linear(linear(x, self.right), self.left, self.bias)


@dataclass
class MogrifierParams:
    rounds: list[MogrifierRound] = field(default_factory=list)

    @property
    def r(self) -> int:
        return len(self.rounds)


@dataclass
class DualHeadParams:
    W_de: Tensor  # [D x E]
    W_dh: Tensor  # [D x H]
    b_d: Tensor


@dataclass
class OutputParams:
    W_y: Tensor  # [V x D] or [V x H]; the embedding storage itself when tied
    b_y: Tensor
    tied: bool = False


@dataclass
class RecurrentState:
    """Per-layer ``(h, c)`` carried from one window to the next."""

    h: list[Tensor]
    c: list[Tensor]

    @classmethod
    def zeros(cls, layers: int, batch: int, hidden: int, dtype=np.float32) -> RecurrentState:
        return cls(
            h=[Tensor(np.zeros((batch, hidden), dtype=dtype)) for _ in range(layers)],
            c=[Tensor(np.zeros((batch, hidden), dtype=dtype)) for _ in range(layers)],
        )

    @property
    def layers(self) -> int:
        return len(self.h)

    @property
    def batch_size(self) -> int:
        return self.h[0].shape[0]

    def detach(self) -> RecurrentState:
        return RecurrentState([t.detach() for t in self.h], [t.detach() for t in self.c])

    def take(self, rows) -> RecurrentState:
        return RecurrentState(
            [Tensor(t.data[rows], dtype=t.dtype) for t in self.h],
            [Tensor(t.data[rows], dtype=t.dtype) for t in self.c],
        )


@dataclass
class DropoutContext:
    """Masks for one timestep of the recurrent stack; ``None`` means no dropout.

    ``recurrent`` and ``mogrifier`` hold per-window masks reused at every
    step; ``internal`` is drawn fresh each step, one mask per layer boundary.
    """

    recurrent: list[Tensor | None] | None = None
    internal: list[Tensor | None] | None = None
    mogrifier: list[list[Tensor | None]] | None = None


def embed(tokens, p: EmbeddingParams) -> Tensor:
    """Look up one embedding row per token id (a length-B vector of ids)."""
    return gather_rows(p.W_ex, np.asarray(tokens))


def lstm_cell(e: Tensor, h_prev: Tensor, c_prev: Tensor, p: LstmParams) -> tuple[Tensor, Tensor]:
    if e.shape[1] != p.input_size or h_prev.shape[1] != p.hidden_size or c_prev.shape != h_prev.shape:
        raise ShapeError(
            f"lstm_cell: e {e.shape}, h {h_prev.shape}, c {c_prev.shape} "
            f"vs cell input {p.input_size}, hidden {p.hidden_size}"
        )

    def pre(We, Wh, b):
        return add(add(matmul(e, transpose(We)), matmul(h_prev, transpose(Wh))), b)

    f = sigmoid(pre(p.W_fe, p.W_fh, p.b_f))
    i = sigmoid(pre(p.W_ie, p.W_ih, p.b_i))
    o = sigmoid(pre(p.W_oe, p.W_oh, p.b_o))
    z = tanh(pre(p.W_ze, p.W_zh, p.b_z))
    c = add(mul(f, c_prev), mul(i, z))
    h = mul(o, tanh(c))
    return h, c


def mogrify(
    e: Tensor,
    h_prev: Tensor,
    p: MogrifierParams,
    masks: list[Tensor | None] | None = None,
) -> tuple[Tensor, Tensor]:
    """Let input and previous hidden state gate each other for ``p.r`` rounds.

    Odd rounds rescale ``e`` by ``2*sigmoid(Q h)``, even rounds rescale ``h``
    by ``2*sigmoid(R e)``. ``masks[i]`` (optional) drops units of the vector
    fed into round ``i``'s linear map.
    """
    if p.r == 0:
        return e, h_prev
    if e.shape[1] != h_prev.shape[1]:
        raise ShapeError(f"mogrify needs equal input and hidden widths, got {e.shape[1]} and {h_prev.shape[1]}")
    for idx, rnd in enumerate(p.rounds):
        m = masks[idx] if masks else None
        if idx % 2 == 0:  # round idx+1 is odd
            src = h_prev if m is None else mul(h_prev, m)
            e = mul(scale(sigmoid(rnd.apply(src)), 2.0), e)
        else:
            src = e if m is None else mul(e, m)
            h_prev = mul(scale(sigmoid(rnd.apply(src)), 2.0), h_prev)
    return e, h_prev


def recurrence_step(
    kind: str,
    e: Tensor,
    state: RecurrentState,
    cells: list[LstmParams],
    mogrifiers: list[MogrifierParams] | None = None,
    dropout: DropoutContext | None = None,
) -> tuple[Tensor, RecurrentState]:
    """Advance the recurrent stack by one timestep and return the top output."""
    if kind not in RECURRENCES:
        raise ValueError(f"unknown recurrence {kind!r}")
    layers = len(cells)
    if kind == "LSTM" and layers != 1:
        raise ValueError(f"LSTM recurrence has exactly one layer, got {layers}")
    if kind != "LSTM" and layers < 2:
        raise ValueError(f"{kind} recurrence needs at least two layers, got {layers}")
    if state.layers != layers:
        raise ValueError(f"state has {state.layers} layer(s) but the {kind} stack has {layers}")
    if kind == "mdLSTM" and (mogrifiers is None or len(mogrifiers) != layers):
        raise ValueError("mdLSTM needs one mogrifier parameter set per layer")
    dropout = dropout or DropoutContext()

    x = e
    hs, cs = [], []
    for layer, cell in enumerate(cells):
        if layer > 0 and dropout.internal and dropout.internal[layer - 1] is not None:
            x = mul(x, dropout.internal[layer - 1])
        h_prev = state.h[layer]
        if kind == "mdLSTM":
            masks = dropout.mogrifier[layer] if dropout.mogrifier else None
            x, h_prev = mogrify(x, h_prev, mogrifiers[layer], masks)
        if dropout.recurrent and dropout.recurrent[layer] is not None:
            h_prev = mul(h_prev, dropout.recurrent[layer])
        h, c = lstm_cell(x, h_prev, state.c[layer], cell)
        hs.append(h)
        cs.append(c)
        x = h
    return x, RecurrentState(hs, cs)


def dual_head(e: Tensor, h: Tensor, p: DualHeadParams) -> Tensor:
    """``ReLU(W_de e + W_dh h + b_d)``: the input reaches the output past the recurrence."""
    if e.shape[1] != p.W_de.shape[1] or h.shape[1] != p.W_dh.shape[1]:
        raise ShapeError(f"dual_head: e {e.shape}, h {h.shape} vs W_de {p.W_de.shape}, W_dh {p.W_dh.shape}")
    return relu(add(add(linear(e, p.W_de), linear(h, p.W_dh)), p.b_d))


def project_logits(x: Tensor, p: OutputParams) -> Tensor:
    if x.shape[1] != p.W_y.shape[1]:
        raise ShapeError(f"project_logits: input width {x.shape[1]} does not match W_y {p.W_y.shape}")
    return linear(x, p.W_y, p.b_y)

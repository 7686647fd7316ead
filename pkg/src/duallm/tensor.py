"""Dense arrays with a small reverse-mode differentiation tape.

Every primitive below computes its forward value with numpy and records a
closure that pushes the output gradient back into its parents. Layers are
built by composing these primitives; nothing else touches gradients.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32

_grad_enabled = True


class ShapeError(ValueError):
    """Operands of a primitive have incompatible shapes."""


class NonFiniteError(FloatingPointError):
    """A NaN or infinity showed up where finite values are required."""


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """A numpy array plus an optional gradient buffer and graph links."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(DEFAULT_DTYPE)
        if arr.ndim > 3:
            raise ShapeError(f"rank {arr.ndim} > 3 is not supported")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> Tensor:
        return Tensor(self.data, dtype=self.data.dtype)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label})"


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype, copy=True)
    else:
        t.grad += g


def _result(data: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    out = Tensor(data, dtype=data.dtype)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def backward(root: Tensor, grad: np.ndarray | None = None) -> None:
    """Accumulate d(root)/d(leaf) into every leaf that requires grad."""
    if not root.requires_grad:
        return
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    root.grad = np.ones_like(root.data) if grad is None else np.asarray(grad, dtype=root.dtype)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
            # interior buffers are dead once propagated
            node.grad = None
            node._backward = None
            node._parents = ()


# ---------------------------------------------------------------------------
# primitives


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    A, B = a.data, b.data

    def back(g):
        if a.requires_grad:
            _accumulate(a, g @ B.T)
        if b.requires_grad:
            _accumulate(b, A.T @ g)

    return _result(A @ B, (a, b), back)


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError(f"transpose expects a matrix, got {a.shape}")

    def back(g):
        _accumulate(a, g.T)

    return _result(a.data.T, (a,), back)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; ``b`` may be a rank-1 bias broadcast over rows of ``a``."""
    bias = b.data.ndim == 1 and a.data.ndim == 2 and a.shape[1] == b.shape[0]
    if a.shape != b.shape and not bias:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} do not match")

    def back(g):
        _accumulate(a, g)
        if b.requires_grad:
            _accumulate(b, g.sum(axis=0) if bias else g)

    return _result(a.data + b.data, (a, b), back)


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} do not match")
    A, B = a.data, b.data

    def back(g):
        if a.requires_grad:
            _accumulate(a, g * B)
        if b.requires_grad:
            _accumulate(b, g * A)

    return _result(A * B, (a, b), back)


def scale(a: Tensor, factor: float) -> Tensor:
    f = a.data.dtype.type(factor)

    def back(g):
        _accumulate(a, g * f)

    return _result(a.data * f, (a,), back)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form cannot overflow and gives exactly 0.5 at 0
    half = x.dtype.type(0.5)
    return half * (np.tanh(half * x) + 1)


def sigmoid(a: Tensor) -> Tensor:
    s = _sigmoid(a.data)

    def back(g):
        _accumulate(a, g * s * (1 - s))

    return _result(s, (a,), back)


def tanh(a: Tensor) -> Tensor:
    t = np.tanh(a.data)

    def back(g):
        _accumulate(a, g * (1 - t * t))

    return _result(t, (a,), back)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    out = np.where(mask, a.data, a.data.dtype.type(0))

    def back(g):
        _accumulate(a, g * mask)

    return _result(out, (a,), back)


_UNARY = {"sigmoid": sigmoid, "tanh": tanh, "relu": relu}
_BINARY = {"mul": mul, "add": add}


def pointwise(kind: str, *args: Tensor) -> Tensor:
    """Dispatch an elementwise primitive by name."""
    if kind in _UNARY:
        if len(args) != 1:
            raise TypeError(f"{kind} takes one argument, got {len(args)}")
        return _UNARY[kind](args[0])
    if kind in _BINARY:
        if len(args) != 2:
            raise TypeError(f"{kind} takes two arguments, got {len(args)}")
        return _BINARY[kind](*args)
    raise ValueError(f"unknown pointwise kind {kind!r}")


def gather_rows(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup ``table[ids]``; the gradient is scattered back to those rows."""
    ids = np.asarray(ids)
    if ids.ndim != 1:
        raise ShapeError(f"gather_rows expects a vector of ids, got shape {ids.shape}")
    n = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= n):
        raise IndexError(f"token id out of range [0, {n}): min {ids.min()}, max {ids.max()}")

    def back(g):
        if table.requires_grad:
            if table.grad is None:
                table.grad = np.zeros_like(table.data)
            np.add.at(table.grad, ids, g)

    return _result(table.data[ids], (table,), back)


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    """Stack matrices vertically (all must share the column count)."""
    cols = {p.shape[1] for p in parts}
    if len(cols) != 1 or any(p.data.ndim != 2 for p in parts):
        raise ShapeError(f"concat_rows: inconsistent shapes {[p.shape for p in parts]}")
    bounds = np.cumsum([0] + [p.shape[0] for p in parts])

    def back(g):
        for p, lo, hi in zip(parts, bounds[:-1], bounds[1:]):
            if p.requires_grad:
                _accumulate(p, g[lo:hi])

    return _result(np.concatenate([p.data for p in parts], axis=0), tuple(parts), back)


def sum_squares(a: Tensor) -> Tensor:
    """Scalar ``sum(a**2)`` (used for L2 penalties)."""
    A = a.data

    def back(g):
        _accumulate(a, 2 * g * A)

    return _result(np.asarray(np.sum(A * A), dtype=A.dtype), (a,), back)


def weighted_sum(a: Tensor, weights: np.ndarray) -> Tensor:
    """Scalar ``sum(a * weights)`` for a constant array ``weights``."""
    w = np.asarray(weights, dtype=a.dtype)
    if w.shape != a.shape:
        raise ShapeError(f"weighted_sum: weights {w.shape} do not match {a.shape}")

    def back(g):
        _accumulate(a, g * w)

    return _result(np.asarray(np.sum(a.data * w), dtype=a.dtype), (a,), back)


def add_scalars(terms: Iterable[Tensor]) -> Tensor:
    terms = list(terms)
    total = terms[0].data.copy()
    for t in terms[1:]:
        total = total + t.data

    def back(g):
        for t in terms:
            _accumulate(t, g)

    return _result(np.asarray(total), tuple(terms), back)


def softmax_rows(logits, temperature: float = 1.0):
    """Row-wise softmax of ``logits / temperature`` (forward only).

    Accepts a Tensor or an ndarray and returns the same kind. Training
    gradients go through :func:`softmax_cross_entropy` instead.
    """
    if not temperature > 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    x = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    z = x / x.dtype.type(temperature)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)
    return Tensor(p, dtype=p.dtype) if isinstance(logits, Tensor) else p


def token_nll(logits: np.ndarray, targets: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    """Per-row negative log-likelihood, computed in float64."""
    if not temperature > 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    z = np.asarray(logits, dtype=np.float64) / temperature
    m = z.max(axis=1)
    lse = m + np.log(np.exp(z - m[:, None]).sum(axis=1))
    return lse - z[np.arange(len(z)), targets]


def softmax_cross_entropy(logits: Tensor, targets: np.ndarray, temperature: float = 1.0) -> Tensor:
    """Mean token cross-entropy of ``softmax(logits / temperature)``."""
    if not temperature > 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    targets = np.asarray(targets)
    n, v = logits.shape
    if targets.shape != (n,):
        raise ShapeError(f"targets shape {targets.shape} does not match {n} rows")
    if targets.size and (targets.min() < 0 or targets.max() >= v):
        raise IndexError(f"target id out of range [0, {v})")
    probs = softmax_rows(logits.data, temperature)
    rows = np.arange(n)
    dt = logits.dtype.type
    loss = -np.mean(np.log(np.maximum(probs[rows, targets], np.finfo(logits.dtype).tiny)))

    def back(g):
        d = probs.copy()
        d[rows, targets] -= 1
        _accumulate(logits, d * (g / dt(n * temperature)))

    return _result(np.asarray(loss, dtype=logits.dtype), (logits,), back)


# ---------------------------------------------------------------------------
# randomness


class RngStream:
    """Seeded random stream; identical seed and draw order give identical draws."""

    def __init__(self, seed: int, stream: int = 0):
        self.seed = int(seed)
        self.stream = int(stream)
        self._gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence([self.seed, self.stream])))
        self.position = 0

    def random(self, shape) -> np.ndarray:
        out = self._gen.random(shape)
        self.position += int(np.prod(shape))
        return out

    def uniform(self, low: float, high: float, shape) -> np.ndarray:
        out = self._gen.uniform(low, high, shape)
        self.position += int(np.prod(shape))
        return out

    def integers(self, high: int, size=None):
        out = self._gen.integers(high, size=size)
        self.position += 1 if size is None else int(np.prod(size))
        return out

    def get_state(self) -> dict:
        return {
            "seed": self.seed,
            "stream": self.stream,
            "position": self.position,
            "bit_generator": self._gen.bit_generator.state,
        }

    def set_state(self, state: dict) -> None:
        self.seed = int(state["seed"])
        self.stream = int(state["stream"])
        self.position = int(state["position"])
        self._gen.bit_generator.state = state["bit_generator"]

    def spawn(self, stream: int) -> RngStream:
        return RngStream(self.seed, stream)


def dropout_mask(shape, rate: float, rng: RngStream, dtype=DEFAULT_DTYPE) -> Tensor:
    """Inverted-dropout mask: 0 with probability ``rate``, else ``1/(1-rate)``."""
    if not 0 <= rate < 1:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    dt = np.dtype(dtype)
    if rate == 0:
        return Tensor(np.ones(shape, dtype=dt))
    keep = rng.random(shape) >= rate
    return Tensor(keep.astype(dt) / dt.type(1 - rate))


def check_finite(t: Tensor | np.ndarray, what: str) -> None:
    arr = t.data if isinstance(t, Tensor) else t
    if not np.all(np.isfinite(arr)):
        bad = int(np.size(arr) - np.count_nonzero(np.isfinite(arr)))
        raise NonFiniteError(f"{what}: {bad} non-finite value(s)")


def global_norm(arrays: Iterable[np.ndarray]) -> float:
    return math.sqrt(math.fsum(float(np.sum(np.square(a, dtype=np.float64))) for a in arrays))

"""Dense float64 tensors with tape-based reverse-mode autodiff and Adam.

Operations record themselves on the active :class:`Tape` (entered with a
``with`` block) whenever one of their inputs requires a gradient. Outside a
tape everything runs as plain numpy, which is what evaluation uses.

Example:
    >>> w = Parameter(np.ones((2, 2)))
    >>> x = Tensor(np.ones((2, 1)))
    >>> with Tape() as tape:
    ...     loss = total(matmul(w, x))
    >>> backward(loss, tape)
    >>> w.grad
    array([[1., 1.],
           [1., 1.]])
"""

from __future__ import annotations

import contextvars
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "ShapeError",
    "TapeError",
    "Tensor",
    "Parameter",
    "Tape",
    "AdamState",
    "add",
    "sub",
    "mul",
    "matmul",
    "transpose",
    "reshape",
    "exp",
    "log",
    "total",
    "sum_rows",
    "mean_rows",
    "softmax_rows",
    "nll_token_loss",
    "gelu",
    "rms_norm",
    "embedding",
    "columns",
    "concat_columns",
    "dropout",
    "backward",
    "adam_step",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class TapeError(RuntimeError):
    """Backward was requested for a value the tape never recorded."""


_ACTIVE_TAPE: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar(
    "fedamole_active_tape", default=None
)


class Tensor:
    """A float64 array that may take part in a recorded computation."""

    __array_priority__ = 100  # make ndarray <op> Tensor defer to Tensor

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return mul(self, 1.0 / float(other))

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> Tensor:
        return transpose(self)


class Parameter(Tensor):
    """Leaf tensor owned by a model.

    ``grad`` always exists and has the value's shape; it only ever
    accumulates when ``trainable`` is true.
    """

    def __init__(self, data, trainable: bool = True):
        super().__init__(data, requires_grad=trainable)
        self.grad = np.zeros_like(self.data)

    @property
    def trainable(self) -> bool:
        return self.requires_grad

    def zero_grad(self) -> None:
        self.grad.fill(0.0)

    def __repr__(self) -> str:
        return f"Parameter(shape={self.shape}, trainable={self.trainable})"


class Tape:
    """Ordered record of the differentiable operations run inside it.

    Nodes are appended as they are created, so the list is already in
    topological order.
    """

    def __init__(self):
        self.nodes: list[Tensor] = []
        self._ids: set[int] = set()
        self._tokens: list[contextvars.Token] = []

    def __enter__(self) -> Tape:
        self._tokens.append(_ACTIVE_TAPE.set(self))
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPE.reset(self._tokens.pop())

    def __len__(self) -> int:
        return len(self.nodes)

    def __contains__(self, node: Tensor) -> bool:
        return id(node) in self._ids

    def _record(self, node: Tensor) -> None:
        self.nodes.append(node)
        self._ids.add(id(node))


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: tuple[Tensor, ...], grad_fn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = False
    out.grad = None
    out._parents = ()
    out._backward = None
    tape = _ACTIVE_TAPE.get()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = grad_fn
        tape._record(out)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(a: np.ndarray, b: np.ndarray, op: str) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast {a.shape} with {b.shape}") from None


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a.data, b.data, "add")
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a.data, b.data, "sub")
    sa, sb = a.shape, b.shape
    return _result(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    """Elementwise product with numpy broadcasting. Python scalars are constants."""
    if not isinstance(b, Tensor) and np.ndim(b) == 0:
        a = _as_tensor(a)
        c = float(b)
        return _result(a.data * c, (a,), lambda g: (g * c,))
    if not isinstance(a, Tensor) and np.ndim(a) == 0:
        return mul(b, a)
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a.data, b.data, "mul")
    ad, bd = a.data, b.data
    return _result(
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


def matmul(a, b) -> Tensor:
    """Product of two 2-D tensors.

    Raises:
        ShapeError: if either operand is not 2-D or the inner sizes differ.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    ad, bd = a.data, b.data
    return _result(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def transpose(a: Tensor) -> Tensor:
    return _result(a.data.T, (a,), lambda g: (g.T,))


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = a.shape
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    return _result(y, (a,), lambda g: (g * y,))


def log(a: Tensor) -> Tensor:
    ad = a.data
    return _result(np.log(ad), (a,), lambda g: (g / ad,))


def total(a: Tensor) -> Tensor:
    """Sum of every element, as a 0-d tensor."""
    shape = a.shape
    return _result(np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, shape).copy(),))


def sum_rows(a: Tensor) -> Tensor:
    """Row sums of an ``[n, k]`` tensor as an ``[n, 1]`` column."""
    shape = a.shape
    return _result(
        a.data.sum(axis=1, keepdims=True), (a,), lambda g: (np.broadcast_to(g, shape).copy(),)
    )


def mean_rows(a: Tensor) -> Tensor:
    """Column means over the rows of an ``[n, k]`` tensor, shape ``[1, k]``."""
    n = a.shape[0]
    shape = a.shape
    return _result(
        a.data.mean(axis=0, keepdims=True),
        (a,),
        lambda g: (np.broadcast_to(g / n, shape).copy(),),
    )


def _softmax(x: np.ndarray, mask: np.ndarray | None) -> np.ndarray:
    if mask is not None:
        x = np.where(mask, x, -np.inf)
    z = x - x.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_rows(x, mask: np.ndarray | None = None) -> Tensor:
    """Numerically stable softmax over each row.

    Args:
        x: ``[n, k]`` logits.
        mask: optional boolean ``[n, k]`` (or broadcastable) array; entries
            that are False get probability exactly zero. Every row needs at
            least one True entry.
    """
    x = _as_tensor(x)
    if x.data.ndim != 2:
        raise ShapeError(f"softmax_rows expects a 2-D tensor, got {x.shape}")
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
        if not mask.any(axis=1).all():
            raise ValueError("softmax_rows: a row has every entry masked")
    y = _softmax(x.data, mask)

    def grad_fn(g):
        return (y * (g - (g * y).sum(axis=1, keepdims=True)),)

    return _result(y, (x,), grad_fn)


def nll_token_loss(logits: Tensor, targets, mask) -> Tensor:
    """Mean negative log-likelihood of ``targets`` over the masked rows.

    Row ``t`` of ``logits`` scores the token at ``targets[t]``; rows where
    ``mask`` is False (instruction positions) are ignored.

    Raises:
        ValueError: if no row is selected or a target is out of range.
    """
    targets = np.asarray(targets, dtype=np.int64)
    mask = np.asarray(mask, dtype=bool)
    n_rows, vocab = logits.shape
    if targets.shape != (n_rows,) or mask.shape != (n_rows,):
        raise ShapeError(f"targets/mask must have shape ({n_rows},)")
    if not mask.any():
        raise ValueError("nll_token_loss: mask selects no response tokens")
    if targets.min() < 0 or targets.max() >= vocab:
        raise ValueError("nll_token_loss: target id outside vocabulary")
    x = logits.data
    z = x - x.max(axis=1, keepdims=True)
    logz = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logz
    rows = np.flatnonzero(mask)
    n = rows.size
    value = -logp[rows, targets[rows]].sum() / n

    def grad_fn(g):
        grad = np.zeros_like(x)
        grad[rows] = np.exp(logp[rows])
        grad[rows, targets[rows]] -= 1.0
        return (grad * (g / n),)

    return _result(np.asarray(value), (logits,), grad_fn)


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a: Tensor) -> Tensor:
    """Tanh approximation of GeLU."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    y = 0.5 * x * (1.0 + t)

    def grad_fn(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x**2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t**2) * dinner),)

    return _result(y, (a,), grad_fn)


def rms_norm(a: Tensor, weight: Tensor, eps: float = 1e-6) -> Tensor:
    """Row-wise RMS normalization scaled by ``weight`` (shape ``[d]``)."""
    x = a.data
    w = weight.data
    inv = 1.0 / np.sqrt((x * x).mean(axis=1, keepdims=True) + eps)
    xhat = x * inv

    def grad_fn(g):
        gx = g * w
        dx = inv * (gx - xhat * (gx * xhat).mean(axis=1, keepdims=True))
        return dx, (g * xhat).sum(axis=0)

    return _result(xhat * w, (a, weight), grad_fn)


def embedding(table: Tensor, ids) -> Tensor:
    """Gather rows ``ids`` from ``table``."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"token id outside [0, {table.shape[0]})")
    shape = table.shape

    def grad_fn(g):
        out = np.zeros(shape)
        np.add.at(out, ids, g)
        return (out,)

    return _result(table.data[ids], (table,), grad_fn)


def columns(a: Tensor, start: int, stop: int) -> Tensor:
    """Columns ``start:stop`` of a 2-D tensor."""
    shape = a.shape

    def grad_fn(g):
        out = np.zeros(shape)
        out[:, start:stop] = g
        return (out,)

    return _result(a.data[:, start:stop], (a,), grad_fn)


def concat_columns(parts: Sequence[Tensor]) -> Tensor:
    parts = tuple(_as_tensor(p) for p in parts)
    edges = np.cumsum([0] + [p.shape[1] for p in parts])

    def grad_fn(g):
        return tuple(g[:, edges[i] : edges[i + 1]] for i in range(len(parts)))

    return _result(np.concatenate([p.data for p in parts], axis=1), parts, grad_fn)


def dropout(a: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; identity when ``rate`` is 0."""
    if rate <= 0.0:
        return a
    keep = (rng.random(a.shape) >= rate) / (1.0 - rate)
    return mul(a, Tensor(keep))


def backward(loss: Tensor, tape: Tape) -> None:
    """Accumulate d(loss)/d(leaf) into every leaf that requires a gradient.

    Raises:
        TapeError: if ``loss`` was not recorded on ``tape``.
        ShapeError: if ``loss`` is not a scalar.
    """
    if loss not in tape:
        raise TapeError("loss was not recorded on this tape")
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if parent._backward is None:
                if parent.grad is None:
                    parent.grad = np.zeros_like(parent.data)
                parent.grad += pg
            else:
                key = id(parent)
                prev = pending.get(key)
                pending[key] = pg if prev is None else prev + pg


@dataclass
class AdamState:
    """Moments and step counter for :func:`adam_step`.

    Moments are created on first use, one pair per parameter in the order
    the parameters are passed.
    """

    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def adam_step(params: Iterable[Parameter], state: AdamState) -> None:
    """Bias-corrected Adam update on trainable parameters, then zero grads."""
    params = list(params)
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    if len(state.m) != len(params):
        raise ValueError("parameter list changed since the optimizer state was created")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for p, m, v in zip(params, state.m, state.v):
        if m.shape != p.data.shape:
            raise ShapeError("optimizer moment shape does not match its parameter")
        if not p.trainable:
            continue
        g = p.grad
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.zero_grad()

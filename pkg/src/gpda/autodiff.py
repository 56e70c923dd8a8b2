"""Minimal dense reverse-mode differentiation over 2-D float64 arrays.

Every value is a matrix; scalars are 1x1.  Operations build a graph of
``Tensor`` nodes on the fly and :func:`backward` walks it in reverse
topological order.  The graph is rebuilt on every forward pass.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    pass


class ContractError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


def _as_matrix(values) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim == 0:
        return arr.reshape(1, 1)
    if arr.ndim == 1:
        return arr.reshape(1, -1)
    if arr.ndim != 2:
        raise ShapeError(f"tensors are 2-D, got shape {arr.shape}")
    return arr


class Tensor:
    """A matrix value with an accumulated gradient and its producing op."""

    __slots__ = ("values", "grad", "requires_grad", "name", "_parents", "_backward", "op")

    def __init__(
        self,
        values,
        requires_grad: bool = False,
        name: str | None = None,
        *,
        _parents: tuple["Tensor", ...] = (),
        _backward: BackwardFn | None = None,
        op: str = "leaf",
    ):
        self.values = _as_matrix(values)
        self.grad = np.zeros_like(self.values)
        self.requires_grad = requires_grad
        self.name = name
        self._parents = _parents
        self._backward = _backward
        self.op = op

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def item(self) -> float:
        if self.values.size != 1:
            raise ContractError(f"item() needs a scalar tensor, got shape {self.shape}")
        return float(self.values[0, 0])

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.values)

    def detach(self) -> "Tensor":
        return Tensor(self.values.copy())

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op}{label})"

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

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(values: np.ndarray, parents: tuple[Tensor, ...], backward: BackwardFn, op: str) -> Tensor:
    needs = any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(values, op=op)
    return Tensor(values, requires_grad=True, _parents=parents, _backward=backward, op=op)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    # Sum over the axes that numpy broadcast from length 1.
    if grad.shape == shape:
        return grad
    for axis in (0, 1):
        if shape[axis] == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- operations


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions differ for {a.shape} and {b.shape}")
    av, bv = a.values, b.values

    def backward(g):
        return (g @ bv.T if a.requires_grad else None, av.T @ g if b.requires_grad else None)

    return _make(av @ bv, (a, b), backward, "matmul")


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _make(a.values + b.values, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return _make(a.values - b.values, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    """Elementwise product with numpy broadcasting; floats are accepted."""
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")
    av, bv = a.values, b.values

    def backward(g):
        return _unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)

    return _make(av * bv, (a, b), backward, "mul")


def relu(x: Tensor) -> Tensor:
    mask = x.values > 0

    def backward(g):
        return (g * mask,)

    return _make(x.values * mask, (x,), backward, "relu")


def sigmoid(x: Tensor) -> Tensor:
    v = x.values
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)

    def backward(g):
        return (g * out * (1.0 - out),)

    return _make(out, (x,), backward, "sigmoid")


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    inside = (x.values >= lo) & (x.values <= hi)

    def backward(g):
        return (g * inside,)

    return _make(np.clip(x.values, lo, hi), (x,), backward, "clip")


def square(x: Tensor) -> Tensor:
    v = x.values

    def backward(g):
        return (2.0 * v * g,)

    return _make(v * v, (x,), backward, "square")


def total(x: Tensor) -> Tensor:
    """Sum of all entries as a 1x1 tensor."""
    shape = x.shape

    def backward(g):
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.array([[x.values.sum()]]), (x,), backward, "sum")


def normalize_rows(x: Tensor, eps: float = 1e-12) -> Tensor:
    """Scale each row to unit Euclidean norm (rows of norm below ``eps`` are left tiny)."""
    v = x.values
    norms = np.sqrt((v * v).sum(axis=1, keepdims=True)) + eps
    out = v / norms

    def backward(g):
        return ((g - out * (g * out).sum(axis=1, keepdims=True)) / norms,)

    return _make(out, (x,), backward, "normalize_rows")


def take_rows(x: Tensor, index) -> Tensor:
    idx = np.asarray(index, dtype=np.intp)
    shape = x.shape

    def backward(g):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return (out,)

    return _make(x.values[idx], (x,), backward, "take_rows")


def gradient_reversal(x: Tensor, coeff: float) -> Tensor:
    """Identity on the way forward; scales the incoming gradient by ``-coeff``."""
    c = float(coeff)

    def backward(g):
        return (-c * g,)

    return _make(x.values.copy(), (x,), backward, "gradient_reversal")


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits: Tensor, labels, weights=None) -> Tensor:
    """Weighted mean cross entropy ``(1/n) sum_i w_i CE(softmax(z_i), y_i)``.

    ``labels`` is an n x C matrix of rows on the simplex (usually one-hot).
    """
    z = logits.values
    y = np.asarray(labels, dtype=np.float64)
    n = z.shape[0]
    if y.shape != z.shape:
        raise ShapeError(f"softmax_cross_entropy: logits {z.shape} vs labels {y.shape}")
    if n == 0:
        raise ContractError("softmax_cross_entropy: empty batch")
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=np.float64).reshape(-1)
    if w.shape != (n,):
        raise ShapeError(f"softmax_cross_entropy: {n} rows but {w.shape[0]} weights")
    if not np.all(np.isfinite(z)):
        raise NumericError("softmax_cross_entropy: non-finite logits")
    if np.any(w < 0):
        raise ContractError("softmax_cross_entropy: negative weights")

    shifted = z - z.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_p = shifted - log_norm
    per_row = -(y * log_p).sum(axis=1)
    value = float(w @ per_row) / n

    def backward(g):
        p = np.exp(log_p)
        row_mass = y.sum(axis=1, keepdims=True)
        return (g[0, 0] * (w[:, None] / n) * (p * row_mass - y),)

    return _make(np.array([[value]]), (logits,), backward, "softmax_cross_entropy")


def binary_cross_entropy(probs: Tensor, targets, weights) -> Tensor:
    """Weighted *sum* ``sum_i w_i BCE(p_i, d_i)`` over an n x 1 probability column."""
    p = probs.values.reshape(-1)
    d = np.asarray(targets, dtype=np.float64).reshape(-1)
    w = np.asarray(weights, dtype=np.float64).reshape(-1)
    if probs.shape[1] != 1 or d.shape != p.shape or w.shape != p.shape:
        raise ShapeError(
            f"binary_cross_entropy: probs {probs.shape}, targets {d.shape}, weights {w.shape}"
        )
    if not np.all(np.isfinite(p)) or np.any(p <= 0.0) or np.any(p >= 1.0):
        raise NumericError("binary_cross_entropy: probabilities must lie strictly inside (0, 1)")
    per_row = -(d * np.log(p) + (1.0 - d) * np.log1p(-p))
    value = float(w @ per_row)

    def backward(g):
        dp = w * (-d / p + (1.0 - d) / (1.0 - p))
        return (g[0, 0] * dp.reshape(-1, 1),)

    return _make(np.array([[value]]), (probs,), backward, "binary_cross_entropy")


def binary_cross_entropy_with_logits(logits: Tensor, targets, weights) -> Tensor:
    """Same value as :func:`binary_cross_entropy` on ``sigmoid(logits)``, computed stably.

    The gradient ``w (sigmoid(z) - d)`` never vanishes for a saturated wrong answer.
    """
    z = logits.values.reshape(-1)
    d = np.asarray(targets, dtype=np.float64).reshape(-1)
    w = np.asarray(weights, dtype=np.float64).reshape(-1)
    if logits.shape[1] != 1 or d.shape != z.shape or w.shape != z.shape:
        raise ShapeError(
            f"binary_cross_entropy_with_logits: logits {logits.shape}, targets {d.shape}, weights {w.shape}"
        )
    if not np.all(np.isfinite(z)):
        raise NumericError("binary_cross_entropy_with_logits: non-finite logits")
    # softplus(z) - d z, with softplus(z) = max(z, 0) + log1p(exp(-|z|))
    per_row = np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z))) - d * z
    value = float(w @ per_row)

    def backward(g):
        s = np.where(z >= 0, 1.0 / (1.0 + np.exp(-np.abs(z))), np.exp(-np.abs(z)) / (1.0 + np.exp(-np.abs(z))))
        return (g[0, 0] * (w * (s - d)).reshape(-1, 1),)

    return _make(np.array([[value]]), (logits,), backward, "binary_cross_entropy_with_logits")


# ------------------------------------------------------------------- backward


class ComputationRecord:
    """Nodes reachable from a root, inputs before outputs."""

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def from_root(cls, root: Tensor) -> "ComputationRecord":
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
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
        return cls(order)

    def __len__(self) -> int:
        return len(self.nodes)

    def __iter__(self):
        return iter(self.nodes)


def backward(root: Tensor) -> ComputationRecord:
    """Accumulate d(root)/d(node) into ``.grad`` of every reachable node."""
    if root.shape != (1, 1):
        raise ContractError(f"backward needs a scalar root, got shape {root.shape}")
    record = ComputationRecord.from_root(root)
    pending: dict[int, np.ndarray] = {id(root): np.ones((1, 1))}
    for node in reversed(record.nodes):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        node.grad = node.grad + g
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            pending[key] = pending[key] + pg if key in pending else pg
    return record


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.zero_grad()

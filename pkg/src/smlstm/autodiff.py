"""Dense float64 tensors with reverse-mode automatic differentiation.

Every op records its inputs and a closure mapping the output gradient to
input gradients. ``backward`` walks the graph once in a fixed topological
order, so gradients are bit-reproducible.
"""
from __future__ import annotations

from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

SIGMOID_CLAMP = 40.0

ArrayLike = Union[np.ndarray, float, int, Sequence]


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class DegenerateInputError(ValueError):
    """Input admits no valid output (e.g. a softmax with every entry masked)."""


class ContractError(ValueError):
    """A documented precondition of an operation was violated."""


class EvaluationError(ArithmeticError):
    """A function evaluated to a non-finite value."""


GradientStore = Dict[str, np.ndarray]


class Tensor:
    """A node in the computation graph.

    Leaves created with ``requires_grad=True`` and a ``name`` are parameters;
    ``backward`` reports their gradients under that name.
    """

    __slots__ = ("data", "requires_grad", "name", "grad", "_parents", "_backward", "op")

    def __init__(
        self,
        data: ArrayLike,
        requires_grad: bool = False,
        name: Optional[str] = None,
        _parents: Tuple["Tensor", ...] = (),
        _backward: Optional[Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]] = None,
        op: str = "leaf",
    ):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.name = name
        self.grad: Optional[np.ndarray] = None
        self._parents = _parents
        self._backward = _backward
        self.op = op

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op}{tag})"

    # operator sugar
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

    def __getitem__(self, index):
        return getitem(self, index)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data: ArrayLike, name: str) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True, name=name)


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def _node(data, parents, backward, op) -> Tensor:
    requires = any(p.requires_grad for p in parents)
    if not requires:
        return Tensor(data, op=op)
    return Tensor(data, requires_grad=True, _parents=tuple(parents), _backward=backward, op=op)


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> Tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: cannot broadcast {a.shape} with {b.shape}") from None


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _node(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _node(a.data * b.data, (a, b), backward, "mul")


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    out = 1.0 / (1.0 + np.exp(-np.clip(x.data, -SIGMOID_CLAMP, SIGMOID_CLAMP)))

    def backward(g):
        return (g * out * (1.0 - out),)

    return _node(out, (x,), backward, "sigmoid")


def tanh(x) -> Tensor:
    x = as_tensor(x)
    out = np.tanh(np.clip(x.data, -SIGMOID_CLAMP, SIGMOID_CLAMP))

    def backward(g):
        return (g * (1.0 - out * out),)

    return _node(out, (x,), backward, "tanh")


def relu(x) -> Tensor:
    """max(0, x); the subgradient at exactly 0 is 0."""
    x = as_tensor(x)
    active = x.data > 0.0

    def backward(g):
        return (g * active,)

    return _node(np.where(active, x.data, 0.0), (x,), backward, "relu")


def square(x) -> Tensor:
    x = as_tensor(x)

    def backward(g):
        return (2.0 * g * x.data,)

    return _node(x.data * x.data, (x,), backward, "square")


# ---------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    """Batched matrix product with numpy broadcasting over leading dims."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner dimensions of {a.shape} and {b.shape} disagree")
    out = np.matmul(a.data, b.data)

    def backward(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape) if b.requires_grad else None
        return ga, gb

    return _node(out, (a, b), backward, "matmul")


def affine(x, W, b) -> Tensor:
    """x @ W + b over the last axis of ``x``.

    ``x`` may carry any number of leading batch axes.
    """
    x, W, b = as_tensor(x), as_tensor(W), as_tensor(b)
    if W.ndim != 2 or x.shape[-1] != W.shape[0] or b.shape != (W.shape[1],):
        raise DimensionError(
            f"affine: x{x.shape}, W{W.shape}, b{b.shape} are not (..., D_in), (D_in, D_out), (D_out,)"
        )
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, W.shape[0])
    out = (x2 @ W.data + b.data).reshape(lead + (W.shape[1],))

    def backward(g):
        g2 = g.reshape(-1, W.shape[1])
        gx = (g2 @ W.data.T).reshape(x.shape) if x.requires_grad else None
        gW = x2.T @ g2 if W.requires_grad else None
        gb = g2.sum(axis=0) if b.requires_grad else None
        return gx, gW, gb

    return _node(out, (x, W, b), backward, "affine")


def linear(x, W) -> Tensor:
    """x @ W over the last axis of ``x`` (no bias)."""
    x, W = as_tensor(x), as_tensor(W)
    if W.ndim != 2 or x.shape[-1] != W.shape[0]:
        raise DimensionError(f"linear: x{x.shape} and W{W.shape} disagree")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, W.shape[0])
    out = (x2 @ W.data).reshape(lead + (W.shape[1],))

    def backward(g):
        g2 = g.reshape(-1, W.shape[1])
        gx = (g2 @ W.data.T).reshape(x.shape) if x.requires_grad else None
        gW = x2.T @ g2 if W.requires_grad else None
        return gx, gW

    return _node(out, (x, W), backward, "linear")


# ---------------------------------------------------------------- reductions and shape


def sum(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    x = as_tensor(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _node(out, (x,), backward, "sum")


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    count = x.data.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)

    def backward(g):
        return (g.reshape(x.shape),)

    return _node(x.data.reshape(shape), (x,), backward, "reshape")


def swapaxes(x, a1: int, a2: int) -> Tensor:
    x = as_tensor(x)

    def backward(g):
        return (np.swapaxes(g, a1, a2),)

    return _node(np.swapaxes(x.data, a1, a2), (x,), backward, "swapaxes")


def expand_dims(x, axis: int) -> Tensor:
    x = as_tensor(x)
    return reshape(x, np.expand_dims(x.data, axis).shape)


def getitem(x, index) -> Tensor:
    x = as_tensor(x)
    out = x.data[index]

    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        return (full,)

    return _node(np.array(out, dtype=np.float64), (x,), backward, "getitem")


def take_rows(table, ids: np.ndarray) -> Tensor:
    """Gather rows of a 2-D ``table`` by integer ``ids`` of any shape."""
    table = as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    out = table.data[ids]

    def backward(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (full,)

    return _node(out, (table,), backward, "take_rows")


def take_along(x, index: np.ndarray, axis: int) -> Tensor:
    """np.take_along_axis with a gradient (scatter-add)."""
    x = as_tensor(x)
    index = np.asarray(index, dtype=np.int64)
    out = np.take_along_axis(x.data, index, axis=axis)

    def backward(g):
        full = np.zeros_like(x.data)
        idx = list(np.indices(out.shape, sparse=True))
        idx[axis] = np.broadcast_to(index, out.shape)
        np.add.at(full, tuple(idx), g)
        return (full,)

    return _node(out, (x,), backward, "take_along")


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat: {[t.shape for t in tensors]}: {exc}") from None
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _node(out, tuple(tensors), backward, "concat")


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.stack([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"stack: {[t.shape for t in tensors]}: {exc}") from None

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _node(out, tuple(tensors), backward, "stack")


# ---------------------------------------------------------------- softmax


def softmax_stable(logits, mask: Optional[np.ndarray] = None, axis: int = -1) -> Tensor:
    """Masked, max-shifted softmax along ``axis``.

    Masked-out entries are exactly zero. ``mask`` broadcasts against the
    logits; every slice along ``axis`` needs at least one kept entry.
    """
    logits = as_tensor(logits)
    x = logits.data
    if mask is None:
        keep = np.ones(x.shape, dtype=bool)
    else:
        keep = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
    if not np.all(keep.any(axis=axis)):
        raise DegenerateInputError("softmax_stable: every position masked out in some slice")
    shifted = np.where(keep, x, -np.inf)
    shifted = shifted - shifted.max(axis=axis, keepdims=True)
    e = np.where(keep, np.exp(shifted), 0.0)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return _node(out, (logits,), backward, "softmax")


# ---------------------------------------------------------------- backward


def _topological_order(root: Tensor) -> List[Tensor]:
    order: List[Tensor] = []
    seen = set()
    stack_: List[Tuple[Tensor, int]] = [(root, 0)]
    while stack_:
        node, i = stack_.pop()
        if i == 0:
            if id(node) in seen:
                continue
            seen.add(id(node))
        parents = node._parents
        if i < len(parents):
            stack_.append((node, i + 1))
            p = parents[i]
            if p.requires_grad and id(p) not in seen:
                stack_.append((p, 0))
        else:
            order.append(node)
    return order


def backward(root: Tensor) -> GradientStore:
    """Gradients of a scalar ``root`` w.r.t. every reachable named leaf.

    Also populates ``.grad`` on every named leaf. Leaves that receive no
    gradient are absent from the returned store (their gradient is zero).
    """
    if root.data.size != 1:
        raise ContractError(f"backward: root must be scalar, got shape {root.shape}")
    if not root.requires_grad:
        return {}
    order = _topological_order(root)
    grads: Dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    store: GradientStore = {}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.name is not None:
                node.grad = g if node.grad is None else node.grad + g
                store[node.name] = node.grad
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    return store


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


def finite_difference_gradient(
    f: Callable[[], float],
    params: Dict[str, Tensor],
    eps: float = 1e-5,
    names: Optional[Iterable[str]] = None,
) -> GradientStore:
    """Central-difference gradient of scalar ``f()`` w.r.t. ``params``.

    ``f`` reads the parameter tensors in place; each coordinate is nudged
    by ``±eps`` and restored.
    """
    if eps <= 0:
        raise ContractError(f"finite_difference_gradient: eps must be > 0, got {eps}")
    out: GradientStore = {}
    for name in names if names is not None else params:
        p = params[name]
        flat = p.data.reshape(-1)
        g = np.zeros(flat.shape)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + eps
            fp = float(f())
            flat[k] = orig - eps
            fm = float(f())
            flat[k] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise EvaluationError(f"non-finite objective perturbing {name}[{k}]")
            g[k] = (fp - fm) / (2.0 * eps)
        out[name] = g.reshape(p.shape)
    return out


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """max |a - n| / max(|a| + |n|, floor), elementwise then max."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.abs(a) + np.abs(n), floor)
    return float(np.max(np.abs(a - n) / denom))

"""Dense arrays with reverse-mode differentiation and the Adam optimizer.

A :class:`Tensor` wraps a numpy array and records the primitive that produced
it.  Calling :meth:`Tensor.backward` on a scalar walks the recorded graph in
reverse topological order and accumulates gradients on every leaf created
with ``requires_grad=True``.

Only a fixed set of primitives is differentiable (see ``PRIMITIVES``); every
model, renderer and loss in this package is written in terms of them.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

ArrayLike = Union[np.ndarray, float, int, Sequence[float]]

PRIMITIVES = (
    "add", "sub", "mul", "div", "neg", "matmul", "exp", "log", "sin", "cos",
    "sigmoid", "softplus", "relu", "square", "sum", "broadcast", "reshape",
    "getitem", "take", "cumsum_exclusive", "concat",
)


class Tensor:
    """N-d array node in a differentiable graph."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data: ArrayLike, requires_grad: bool = False, dtype=None,
                 _parents: Tuple["Tensor", ...] = (), _backward: Optional[Callable] = None,
                 op: str = "leaf"):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
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

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op})"

    def __len__(self) -> int:
        return len(self.data)

    # operator sugar
    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return div(self, other)
    def __rtruediv__(self, other): return div(other, self)
    def __neg__(self): return neg(self)
    def __matmul__(self, other): return matmul(self, other)
    def __getitem__(self, index): return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self, seed: Optional[ArrayLike] = None) -> None:
        backward(self, seed)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if dtype is None:
        return Tensor(x)
    return Tensor(np.asarray(x, dtype=dtype))


def _lift(a, b) -> Tuple[Tensor, Tensor]:
    # python scalars and plain arrays adopt the dtype of the tensor operand
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    elif not isinstance(a, Tensor):
        a, b = Tensor(a), Tensor(b)
    return a, b


def _make(data: np.ndarray, parents: Tuple[Tensor, ...], backward_fn, op: str) -> Tensor:
    needs = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=needs, _parents=parents if needs else (),
                  _backward=backward_fn if needs else None, op=op)


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


# ---------------------------------------------------------------------------
# binary primitives

def add(a, b) -> Tensor:
    a, b = _lift(a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)
    return _make(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = _lift(a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)
    return _make(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = _lift(a, b)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)
    return _make(a.data * b.data, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = _lift(a, b)
    out = a.data / b.data

    def bw(g):
        gb = g / b.data
        return _unbroadcast(gb, a.shape), _unbroadcast(-gb * out, b.shape)
    return _make(out, (a, b), bw, "div")


def matmul(a, b) -> Tensor:
    a, b = _lift(a, b)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul expects 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def bw(g):
        return g @ b.data.T, a.data.T @ g
    return _make(a.data @ b.data, (a, b), bw, "matmul")


# ---------------------------------------------------------------------------
# unary primitives

def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def sin(a: Tensor) -> Tensor:
    return _make(np.sin(a.data), (a,), lambda g: (g * np.cos(a.data),), "sin")


def cos(a: Tensor) -> Tensor:
    return _make(np.cos(a.data), (a,), lambda g: (-g * np.sin(a.data),), "cos")


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid_np(a.data)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def softplus(a: Tensor) -> Tensor:
    x = a.data
    out = np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))
    return _make(out, (a,), lambda g: (g * _sigmoid_np(x),), "softplus")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def square(a: Tensor) -> Tensor:
    return _make(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,), "square")


# ---------------------------------------------------------------------------
# shape primitives

def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape),)
    return _make(np.asarray(out), (a,), bw, "sum")


def broadcast_to(a: Tensor, shape: Tuple[int, ...]) -> Tensor:
    out = np.broadcast_to(a.data, shape)
    return _make(out, (a,), lambda g: (_unbroadcast(g, a.shape),), "broadcast")


def reshape(a: Tensor, shape: Tuple[int, ...]) -> Tensor:
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def getitem(a: Tensor, index) -> Tensor:
    parts = index if isinstance(index, tuple) else (index,)
    advanced = any(isinstance(p, (np.ndarray, list)) for p in parts)

    def bw(g):
        full = np.zeros_like(a.data)
        if advanced:
            np.add.at(full, index, g)
        else:
            full[index] += g
        return (full,)
    return _make(a.data[index], (a,), bw, "getitem")


def take(table: Tensor, rows: np.ndarray) -> Tensor:
    """Gather rows of a 2-d table (embedding lookup)."""
    rows = np.asarray(rows, dtype=np.int64)
    if rows.size and (rows.min() < 0 or rows.max() >= table.shape[0]):
        raise IndexError(f"row index out of range for table with {table.shape[0]} rows")

    def bw(g):
        full = np.zeros_like(table.data)
        np.add.at(full, rows, g)
        return (full,)
    return _make(table.data[rows], (table,), bw, "take")


def cumsum_exclusive(a: Tensor, axis: int = -1) -> Tensor:
    """out[i] = sum of a[j] for j < i along ``axis``."""
    axis = axis % a.ndim
    inclusive = np.cumsum(a.data, axis=axis)
    out = inclusive - a.data

    def bw(g):
        # reverse exclusive cumsum
        rev = np.flip(np.cumsum(np.flip(g, axis=axis), axis=axis), axis=axis)
        return (rev - g,)
    return _make(out, (a,), bw, "cumsum_exclusive")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    axis_ = axis % tensors[0].ndim
    sizes = [t.shape[axis_] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis_))
    return _make(np.concatenate([t.data for t in tensors], axis=axis_), tuple(tensors), bw, "concat")


# ---------------------------------------------------------------------------
# composites (built only from primitives)

def mean(a: Tensor, axis=None) -> Tensor:
    n = a.data.size if axis is None else a.shape[axis]
    return tsum(a, axis=axis) * (1.0 / n)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shift = a.data.max(axis=axis, keepdims=True)  # constant, gradient-free
    e = exp(a - shift)
    return e / tsum(e, axis=axis, keepdims=True)


# ---------------------------------------------------------------------------
# reverse pass

def topological_order(root: Tensor) -> List[Tensor]:
    """Nodes reachable from ``root``; every node's inputs precede it."""
    order: List[Tensor] = []
    seen = set()
    stack = [(root, False)]
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
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Tensor, seed: Optional[ArrayLike] = None) -> None:
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for trainable leaves."""
    if seed is None:
        if root.data.size != 1:
            raise ValueError("seed required for non-scalar output")
        seed_arr = np.ones_like(root.data)
    else:
        seed_arr = np.asarray(seed, dtype=root.dtype)
        if seed_arr.shape != root.shape:
            raise ValueError(f"seed shape {seed_arr.shape} does not match output {root.shape}")
    if not root.requires_grad:
        return
    grads: Dict[int, np.ndarray] = {id(root): seed_arr}
    for node in reversed(topological_order(root)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.requires_grad:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


class Graph:
    """A traced computation with named inputs.

    ``fn`` receives the named input tensors as keyword arguments and returns a
    tensor or a mapping of named tensors.  :meth:`forward` evaluates it and
    checks every intermediate for non-finite values; :meth:`backward` seeds one
    output and returns gradients for each named input that requires them.
    """

    def __init__(self, fn: Callable[..., Union[Tensor, Mapping[str, Tensor]]]):
        self.fn = fn
        self._inputs: Optional[Dict[str, Tensor]] = None
        self._outputs: Optional[Dict[str, Tensor]] = None
        self.nodes: List[Tensor] = []

    def forward(self, inputs: Mapping[str, Union[Tensor, ArrayLike]]) -> Dict[str, np.ndarray]:
        bound = {k: v if isinstance(v, Tensor) else Tensor(v) for k, v in inputs.items()}
        for t in bound.values():
            t.grad = None
        out = self.fn(**bound)
        outputs = {"out": out} if isinstance(out, Tensor) else dict(out)
        nodes: List[Tensor] = []
        seen = set()
        for t in outputs.values():
            for n in topological_order(t):
                if id(n) not in seen:
                    seen.add(id(n))
                    nodes.append(n)
        for n in nodes:
            if not np.all(np.isfinite(n.data)):
                raise FloatingPointError(f"non-finite value produced by '{n.op}'")
        self._inputs, self._outputs, self.nodes = bound, outputs, nodes
        return {k: v.data for k, v in outputs.items()}

    def backward(self, seed: Optional[ArrayLike] = None, output: str = "out") -> Dict[str, np.ndarray]:
        if self._outputs is None:
            raise RuntimeError("backward called before forward")
        if output not in self._outputs:
            raise KeyError(output)
        for t in self._inputs.values():
            t.grad = None
        backward(self._outputs[output], seed)
        return {k: (t.grad if t.grad is not None else np.zeros_like(t.data))
                for k, t in self._inputs.items() if t.requires_grad}


# ---------------------------------------------------------------------------
# optimizer

@dataclass
class AdamState:
    first_moment: Dict[str, np.ndarray]
    second_moment: Dict[str, np.ndarray]
    step_count: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: Mapping[str, Tensor], **kw) -> "AdamState":
        return cls({k: np.zeros_like(p.data) for k, p in params.items()},
                   {k: np.zeros_like(p.data) for k, p in params.items()}, **kw)


def adam_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray],
              state: AdamState, lr: float) -> AdamState:
    """Apply one bias-corrected Adam update in place; returns ``state``."""
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter '{k}'")
    state.step_count += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step_count
    c2 = 1.0 - b2 ** state.step_count
    for k, p in params.items():
        g = grads.get(k)
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter '{k}' {p.shape}")
        m = state.first_moment[k]
        v = state.second_moment[k]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        step = (lr / c1) * m / (np.sqrt(v / c2) + state.eps)
        p.data -= step.astype(p.dtype, copy=False)
    return state


def numerical_gradient(f: Callable[[], float], arr: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar ``f`` w.r.t. ``arr`` (mutated in place, restored)."""
    grad = np.zeros_like(arr)
    flat = arr.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    """max |a - b| / max(|a|, |b|, floor), elementwise maximum."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0

"""Dense float64 tensors with define-by-run reverse-mode autodiff.

Every differentiable operation returns a new :class:`Tensor` that remembers
its parents and a closure mapping the output gradient to parent gradients.
Calling :meth:`Tensor.backward` builds a :class:`GradTape` (a topological
ordering of the graph reachable from the root) and replays it in reverse,
summing gradients where subexpressions are shared.

Binary elementwise ops broadcast in the numpy sense; gradients are reduced
back to each operand's shape.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, *, _parents=(), _backward=None, op: str = "leaf"):
        self.data = np.array(data, dtype=np.float64) if not isinstance(data, np.ndarray) or data.dtype != np.float64 else data
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = _parents
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = _backward
        self.op = op

    # -- basic protocol ---------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- operators --------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / other)
        return div(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)

    def backward(self, grad: np.ndarray | None = None) -> "GradTape":
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without an explicit gradient needs a scalar output")
            grad = np.ones_like(self.data)
        if not np.all(np.isfinite(self.data)):
            raise FloatingPointError(f"non-finite value at backward root ({self.op})")
        tape = GradTape.from_root(self)
        tape.run(self, np.asarray(grad, dtype=np.float64))
        return tape


class GradTape:
    """Topologically ordered record of the operations behind one output."""

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def from_root(cls, root: Tensor) -> "GradTape":
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
                if id(p) not in seen and _needs_grad(p):
                    stack.append((p, False))
        return cls(order)

    def run(self, root: Tensor, grad: np.ndarray) -> None:
        grads: dict[int, np.ndarray] = {id(root): grad}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            if node.requires_grad:
                node.grad = g.copy() if node.grad is None else node.grad + g
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not _needs_grad(parent):
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg


def _needs_grad(t: Tensor) -> bool:
    return t.requires_grad or t._backward is not None


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward, op: str) -> Tensor:
    if any(_needs_grad(p) for p in parents):
        return Tensor(data, _parents=parents, _backward=backward, op=op)
    return Tensor(data, op=op)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# -- elementwise ------------------------------------------------------------
def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)), "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)), "div")


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return _make(a.data * c, (a,), lambda g: (g * c,), "scale")


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise FloatingPointError("log of a non-positive value")
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def square(a) -> Tensor:
    a = as_tensor(a)
    return _make(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,), "square")


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (0.5 * g / out,), "sqrt")


# -- linear algebra / shape ---------------------------------------------------
def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes; leading axes of ``a`` may batch a 2-D ``b``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(out, (a, b), backward, "matmul")


def transpose(a, axes: Sequence[int] | None = None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),), "transpose")


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    src = a.shape
    return _make(a.data.reshape(tuple(shape)), (a,), lambda g: (g.reshape(src),), "reshape")


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]
    return _make(np.concatenate([t.data for t in ts], axis=axis), tuple(ts),
                 lambda g: tuple(np.split(g, splits, axis=axis)), "concat")


def gather_rows(table, idx) -> Tensor:
    """``table[idx]`` along axis 0; repeated indices accumulate gradient."""
    table = as_tensor(table)
    idx = np.asarray(idx, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise IndexError(f"gather index out of range for table with {table.shape[0]} rows")

    def backward(g):
        out = np.zeros_like(table.data)
        np.add.at(out, idx, g)
        return (out,)

    return _make(table.data[idx], (table,), backward, "gather_rows")


# -- reductions ---------------------------------------------------------------
def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(np.asarray(out), (a,), backward, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    count = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return scale(sum_(a, axis=axis, keepdims=keepdims), 1.0 / count)


def logsumexp(a, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """log(sum(mask * exp(a))) along ``axis``; every slice needs at least one unmasked entry."""
    a = as_tensor(a)
    if mask is None:
        m = a.data.max(axis=axis, keepdims=True)
        e = np.exp(a.data - m)
    else:
        mask = np.asarray(mask, dtype=bool)
        m = np.where(mask, a.data, -np.inf).max(axis=axis, keepdims=True)
        e = np.where(mask, np.exp(np.where(mask, a.data, m) - m), 0.0)
    s = e.sum(axis=axis, keepdims=True)
    out = (np.log(s) + m).squeeze(axis)
    return _make(out, (a,), lambda g: (np.expand_dims(g, axis) * e / s,), "logsumexp")


# -- neural-net primitives -------------------------------------------------------
def softmax_rows(x) -> Tensor:
    """Softmax along the last axis with max subtraction."""
    x = as_tensor(x)
    e = np.exp(x.data - x.data.max(axis=-1, keepdims=True))
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _make(out, (x,), backward, "softmax")


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm expects gamma/beta of shape ({d},), got {gamma.shape} and {beta.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def backward(g):
        gx_hat = g * gamma.data
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _make(out, (x, gamma, beta), backward, "layer_norm")


def l2_normalize(x, eps: float = 1e-12) -> Tensor:
    """Rows scaled to unit L2 norm; ``eps`` is added to the norm."""
    x = as_tensor(x)
    norm = np.sqrt((x.data * x.data).sum(axis=-1, keepdims=True))
    denom = norm + eps
    out = x.data / denom

    def backward(g):
        dot = (g * x.data).sum(axis=-1, keepdims=True)
        safe = np.where(norm > 0, norm, 1.0)
        return (g / denom - x.data * dot / (denom * denom * safe),)

    return _make(out, (x,), backward, "l2_normalize")


def linear(x, weight, bias=None) -> Tensor:
    y = matmul(x, weight)
    return y if bias is None else add(y, bias)


# -- gradient verification ----------------------------------------------------------
def numerical_grad(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def grad_check(f: Callable[[Tensor], Tensor], x, h: float = 1e-5) -> float:
    """Max over coordinates of |analytic - central difference| / max(1, |central difference|)."""
    x0 = np.array(as_tensor(x).data, dtype=np.float64)

    def value(arr: np.ndarray) -> float:
        v = float(np.asarray(f(Tensor(arr.copy())).data).reshape(()))
        if not np.isfinite(v):
            raise FloatingPointError("grad_check: function value is not finite")
        return v

    value(x0)
    leaf = Tensor(x0.copy(), requires_grad=True)
    f(leaf).backward()
    analytic = leaf.grad if leaf.grad is not None else np.zeros_like(x0)
    numeric = numerical_grad(value, x0, h)
    return float(np.max(np.abs(analytic - numeric) / np.maximum(1.0, np.abs(numeric)))) if x0.size else 0.0


def grad_check_params(loss_fn: Callable[[], Tensor], params: Iterable[Tensor], h: float = 1e-5) -> float:
    """Like :func:`grad_check` but over parameter tensors captured by ``loss_fn`` (perturbed in place)."""
    params = list(params)
    for p in params:
        p.grad = None
    loss_fn().backward()
    worst = 0.0
    for p in params:
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = loss_fn().item()
            flat[i] = orig - h
            fm = loss_fn().item()
            flat[i] = orig
            num = (fp - fm) / (2.0 * h)
            worst = max(worst, abs(analytic.reshape(-1)[i] - num) / max(1.0, abs(num)))
        p.grad = None
    return worst

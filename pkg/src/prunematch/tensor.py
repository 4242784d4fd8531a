"""Dense float64 tensors with tape-based reverse-mode differentiation.

Only the operations the matching pipeline needs are provided. A node is
recorded on the tape only when at least one operand requires a gradient,
so evaluating with constant parameters costs no bookkeeping.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, NonFiniteError

__all__ = [
    "Tensor",
    "as_tensor",
    "matmul",
    "softmax",
    "elu_plus_one",
    "layer_norm",
    "sigmoid",
    "relu",
    "exp",
    "log",
    "sqrt",
    "clamp",
    "take",
    "scatter_rows",
    "concat",
    "where",
    "straight_through",
    "grad_check",
    "GradCheckReport",
    "find_non_finite",
]


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad=False, op="leaf"):
        if isinstance(data, np.ndarray) and data.dtype == np.float64:
            self.data = data
        else:
            self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self.op = op

    # -- basic properties -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def T(self):
        return self.transpose()

    def __len__(self):
        return len(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    # -- autodiff ---------------------------------------------------------
    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into ``.grad`` of every leaf requiring grad."""
        if not self.requires_grad:
            raise RuntimeError("backward() on a tensor that does not require grad")
        if grad is None:
            if self.data.size != 1:
                raise DimensionError(f"backward() needs an explicit gradient for shape {self.shape}")
            grad = np.ones_like(self.data)
        order = _topological(self)
        grads = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                pg = _unbroadcast(pg, parent.shape)
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- operators --------------------------------------------------------
    def __add__(self, other):
        other = as_tensor(other)
        return _node(self.data + other.data, (self, other), lambda g: (g, g), "add")

    __radd__ = __add__

    def __sub__(self, other):
        other = as_tensor(other)
        return _node(self.data - other.data, (self, other), lambda g: (g, -g), "sub")

    def __rsub__(self, other):
        return as_tensor(other) - self

    def __mul__(self, other):
        other = as_tensor(other)
        a, b = self.data, other.data
        return _node(a * b, (self, other), lambda g: (g * b, g * a), "mul")

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = as_tensor(other)
        a, b = self.data, other.data
        out = a / b
        return _node(out, (self, other), lambda g: (g / b, -g * out / b), "div")

    def __rtruediv__(self, other):
        return as_tensor(other) / self

    def __neg__(self):
        return _node(-self.data, (self,), lambda g: (-g,), "neg")

    def __pow__(self, exponent):
        if isinstance(exponent, Tensor):
            raise TypeError("only constant exponents are supported")
        a = self.data
        return _node(a**exponent, (self,), lambda g: (g * exponent * a ** (exponent - 1),), "pow")

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(as_tensor(other), self)

    def __getitem__(self, index):
        shape = self.shape
        basic = _is_basic_index(index)

        def backward(g):
            full = np.zeros(shape)
            if basic:
                full[index] = g
            else:
                np.add.at(full, index, g)
            return (full,)

        return _node(self.data[index], (self,), backward, "getitem")

    # -- reductions and reshapes -----------------------------------------
    def sum(self, axis=None, keepdims=False):
        shape = self.shape

        def backward(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape),)

        return _node(self.data.sum(axis=axis, keepdims=keepdims), (self,), backward, "sum")

    def mean(self, axis=None, keepdims=False):
        n = self.data.size if axis is None else np.prod([self.shape[a] for a in np.atleast_1d(axis)])
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.shape
        return _node(self.data.reshape(shape), (self,), lambda g: (g.reshape(old),), "reshape")

    def transpose(self, *axes):
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        elif len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        inverse = tuple(np.argsort(axes))
        return _node(self.data.transpose(axes), (self,), lambda g: (g.transpose(inverse),), "transpose")

    # -- elementwise shortcuts -------------------------------------------
    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sqrt(self):
        return sqrt(self)

    def relu(self):
        return relu(self)

    def sigmoid(self):
        return sigmoid(self)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents, backward, op):
    out = Tensor(data, op=op)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _is_basic_index(index):
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in items)


def _topological(root):
    order, seen = [], set()
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


# -- primitive operations ---------------------------------------------------


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    x, y = a.data, b.data

    def backward(g):
        return g @ np.swapaxes(y, -1, -2), np.swapaxes(x, -1, -2) @ g

    return _node(x @ y, (a, b), backward, "matmul")


def exp(x):
    x = as_tensor(x)
    out = np.exp(x.data)
    return _node(out, (x,), lambda g: (g * out,), "exp")


def log(x):
    x = as_tensor(x)
    a = x.data
    return _node(np.log(a), (x,), lambda g: (g / a,), "log")


def sqrt(x):
    x = as_tensor(x)
    out = np.sqrt(x.data)
    return _node(out, (x,), lambda g: (g * 0.5 / out,), "sqrt")


def relu(x):
    x = as_tensor(x)
    pos = x.data > 0
    return _node(np.where(pos, x.data, 0.0), (x,), lambda g: (g * pos,), "relu")


def sigmoid(x):
    x = as_tensor(x)
    a = x.data
    out = np.empty_like(a)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    e = np.exp(a[~pos])
    out[~pos] = e / (1.0 + e)
    return _node(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def elu_plus_one(x):
    """elu(x) + 1: x + 1 for x > 0, exp(x) otherwise."""
    x = as_tensor(x)
    a = x.data
    pos = a > 0
    ex = np.exp(np.minimum(a, 0.0))
    out = np.where(pos, a + 1.0, ex)
    deriv = np.where(pos, 1.0, ex)
    return _node(out, (x,), lambda g: (g * deriv,), "elu_plus_one")


def softmax(x, axis=-1):
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _node(out, (x,), backward, "softmax")


def layer_norm(x, axis=-1, eps=1e-5):
    """Normalize to zero mean and unit (population) variance along ``axis``."""
    x = as_tensor(x)
    a = x.data
    mu = a.mean(axis=axis, keepdims=True)
    centered = a - mu
    inv = 1.0 / np.sqrt((centered**2).mean(axis=axis, keepdims=True) + eps)
    xhat = centered * inv

    def backward(g):
        gm = g.mean(axis=axis, keepdims=True)
        gx = (g * xhat).mean(axis=axis, keepdims=True)
        return (inv * (g - gm - xhat * gx),)

    return _node(xhat, (x,), backward, "layer_norm")


def clamp(x, lo=None, hi=None):
    x = as_tensor(x)
    a = x.data
    out = np.clip(a, lo, hi)
    inside = out == a
    return _node(out, (x,), lambda g: (g * inside,), "clamp")


def take(x, indices):
    """Gather along the first axis; ``indices`` may have any integer shape."""
    x = as_tensor(x)
    idx = np.asarray(indices, dtype=np.intp)
    shape = x.shape

    def backward(g):
        full = np.zeros(shape)
        np.add.at(full, idx.reshape(-1), g.reshape((-1,) + shape[1:]))
        return (full,)

    return _node(x.data[idx], (x,), backward, "take")


def scatter_rows(carry, indices, rows):
    """Copy of ``carry`` with ``carry[indices] = rows``."""
    carry, rows = as_tensor(carry), as_tensor(rows)
    idx = np.asarray(indices, dtype=np.intp)
    out = carry.data.copy()
    out[idx] = rows.data

    def backward(g):
        gc = g.copy()
        gc[idx] = 0.0
        return gc, g[idx]

    return _node(out, (carry, rows), backward, "scatter_rows")


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _node(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward, "concat")


def straight_through(value, surrogate):
    """Forward ``value`` exactly; backward passes the gradient to ``surrogate``."""
    surrogate = as_tensor(surrogate)
    value = np.asarray(value, dtype=np.float64)
    if value.shape != surrogate.shape:
        raise DimensionError(f"straight-through value {value.shape} vs surrogate {surrogate.shape}")
    return _node(value.copy(), (surrogate,), lambda g: (g,), "straight_through")


def where(condition, a, b):
    """Elementwise select with a constant boolean condition."""
    cond = np.asarray(condition, dtype=bool)
    a, b = as_tensor(a), as_tensor(b)
    out = np.where(cond, a.data, b.data)
    return _node(out, (a, b), lambda g: (np.where(cond, g, 0.0), np.where(cond, 0.0, g)), "where")


# -- verification -------------------------------------------------------------


def find_non_finite(root):
    """Return the earliest recorded node (in evaluation order) holding non-finite data."""
    for node in _topological(root):
        if not np.all(np.isfinite(node.data)):
            return node
    return None


@dataclass
class GradCheckReport:
    max_rel_err: float
    passed: bool
    tol: float
    h: float
    per_input: list = field(default_factory=list)
    worst: tuple | None = None  # (input index, flat coordinate, analytic, numeric)

    def __str__(self):
        status = "ok" if self.passed else "FAIL"
        return f"grad_check {status}: max rel err {self.max_rel_err:.3e} (tol {self.tol:g}, h {self.h:g})"


def grad_check(f, inputs, h=1e-5, tol=1e-4, floor=1e-6, max_coords=None, rng=None):
    """Compare reverse-mode gradients of scalar ``f(*inputs)`` with central differences.

    The relative error per coordinate is ``|a - n| / max(|a|, |n|, floor)``;
    ``floor`` turns comparisons of vanishing gradients into absolute ones.
    ``max_coords`` limits how many coordinates of each input are probed
    (chosen with ``rng``); ``None`` probes every coordinate.
    """
    if not 0.0 < h <= 1e-2:
        raise ValueError(f"step h={h} outside (0, 1e-2]")
    arrays = [np.array(as_tensor(x).data, dtype=np.float64) for x in inputs]
    leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = f(*leaves)
    if out.size != 1:
        raise DimensionError(f"grad_check needs a scalar output, got shape {out.shape}")
    bad = find_non_finite(out) if out.requires_grad else None
    if bad is not None:
        raise NonFiniteError(bad.op)
    if not out.requires_grad:
        analytic = [np.zeros_like(a) for a in arrays]
    else:
        out.backward()
        analytic = [np.zeros_like(a) if leaf.grad is None else leaf.grad for a, leaf in zip(arrays, leaves)]

    rng = rng if rng is not None else np.random.default_rng(0)
    worst, max_err, per_input = None, 0.0, []
    for i, base in enumerate(arrays):
        coords = np.arange(base.size)
        if max_coords is not None and base.size > max_coords:
            coords = rng.choice(base.size, size=max_coords, replace=False)
        input_err = 0.0
        for c in coords:
            plus, minus = base.copy(), base.copy()
            plus.flat[c] += h
            minus.flat[c] -= h
            f_plus = _evaluate(f, arrays, i, plus)
            f_minus = _evaluate(f, arrays, i, minus)
            numeric = (f_plus - f_minus) / (2.0 * h)
            a = analytic[i].flat[c]
            err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
            if not np.isfinite(err):
                raise NonFiniteError("finite-difference evaluation")
            input_err = max(input_err, err)
            if err >= max_err:
                max_err, worst = err, (i, int(c), float(a), float(numeric))
        per_input.append(input_err)
    return GradCheckReport(max_err, max_err < tol, tol, h, per_input, worst)


def _evaluate(f, arrays, i, replaced):
    args = [Tensor(replaced if j == i else a) for j, a in enumerate(arrays)]
    return float(f(*args).data)

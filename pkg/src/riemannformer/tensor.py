"""Dense float64 tensors with a tape-based reverse-mode differentiation engine.

Every operation records its parents and a backward rule on the result.  Node
ids grow monotonically, so sorting the reachable nodes by descending id gives
a valid reverse topological order and a deterministic accumulation order.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor", "Parameter", "ShapeError", "GradCheckReport",
    "tensor", "as_tensor", "matmul", "softmax_lastdim", "layer_norm",
    "add", "sub", "mul", "div", "neg", "scale", "power", "exp", "log", "sqrt",
    "sin", "cos", "tanh", "softplus", "gelu", "sum", "mean", "reshape",
    "transpose", "stack", "concatenate", "cross_entropy", "backward",
    "grad_check", "node_count",
]

CHECK_FINITE = True

_ids = itertools.count()


class ShapeError(ValueError):
    pass


class Tensor:
    """Immutable value plus the bookkeeping needed to differentiate through it."""

    __slots__ = ("data", "requires_grad", "parents", "op", "id", "_backward", "grad", "name")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad=False, parents=(), op="leaf", backward_fn=None):
        arr = np.asarray(data, dtype=np.float64)
        if CHECK_FINITE and not np.isfinite(arr).all():
            raise FloatingPointError(f"non-finite values produced by '{op}'")
        self.data = arr
        self.requires_grad = requires_grad
        self.parents = tuple(parents)
        self.op = op
        self.id = next(_ids)
        self._backward = backward_fn
        self.grad = None
        self.name = None

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
        return transpose(self)

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op!r})"

    def __len__(self):
        return self.data.shape[0]

    __add__ = lambda self, o: add(self, o)
    __radd__ = lambda self, o: add(o, self)
    __sub__ = lambda self, o: sub(self, o)
    __rsub__ = lambda self, o: sub(o, self)
    __mul__ = lambda self, o: mul(self, o)
    __rmul__ = lambda self, o: mul(o, self)
    __truediv__ = lambda self, o: div(self, o)
    __rtruediv__ = lambda self, o: div(o, self)
    __matmul__ = lambda self, o: matmul(self, o)
    __rmatmul__ = lambda self, o: matmul(o, self)
    __neg__ = lambda self: neg(self)
    __pow__ = lambda self, p: power(self, p)
    __getitem__ = lambda self, idx: _getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def exp(self):
        return exp(self)

    def backward(self):
        return backward(self)


class Parameter(Tensor):
    """Learnable leaf with a dotted name such as ``blocks.3.attn.theta``."""

    __slots__ = ()

    def __init__(self, value, name=""):
        super().__init__(np.array(value, dtype=np.float64), requires_grad=True)
        self.name = name
        self.grad = np.zeros_like(self.data)

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def assign(self, value):
        value = np.asarray(value, dtype=np.float64)
        if value.shape != self.data.shape:
            raise ShapeError(f"{self.name}: cannot assign shape {value.shape} to {self.data.shape}")
        self.data = value.copy()

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape})"


def tensor(data, requires_grad=False):
    return Tensor(data, requires_grad=requires_grad)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def node_count():
    """Number of nodes created so far; differences measure op counts."""
    return next(_ids)


def _make(data, parents, op, backward_fn):
    req = any(p.requires_grad for p in parents)
    return Tensor(data, req, parents if req else (), op, backward_fn if req else None)


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_broadcast(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} are not broadcastable") from None


# --- elementwise -----------------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)
    return _make(a.data + b.data, (a, b), "add",
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)
    return _make(a.data - b.data, (a, b), "sub",
                 lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)
    return _make(a.data * b.data, (a, b), "mul",
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("div", a, b)
    out = a.data / b.data

    def bw(g):
        return _unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)
    return _make(out, (a, b), "div", bw)


def neg(a):
    a = as_tensor(a)
    return _make(-a.data, (a,), "neg", lambda g: (-g,))


def scale(a, c: float):
    a = as_tensor(a)
    c = float(c)
    return _make(a.data * c, (a,), "scale", lambda g: (g * c,))


def power(a, p: float):
    a = as_tensor(a)
    p = float(p)
    if not p.is_integer() and (a.data < 0).any():
        raise ValueError(f"pow: negative base with non-integer exponent {p}")
    out = a.data ** p
    return _make(out, (a,), "pow", lambda g: (g * p * a.data ** (p - 1),))


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), "exp", lambda g: (g * out,))


def log(a):
    a = as_tensor(a)
    if (a.data <= 0).any():
        raise ValueError("log: non-positive argument")
    return _make(np.log(a.data), (a,), "log", lambda g: (g / a.data,))


def sqrt(a):
    a = as_tensor(a)
    if (a.data < 0).any():
        raise ValueError("sqrt: negative argument")
    out = np.sqrt(a.data)
    return _make(out, (a,), "sqrt", lambda g: (g * 0.5 / out,))


def sin(a):
    a = as_tensor(a)
    return _make(np.sin(a.data), (a,), "sin", lambda g: (g * np.cos(a.data),))


def cos(a):
    a = as_tensor(a)
    return _make(np.cos(a.data), (a,), "cos", lambda g: (-g * np.sin(a.data),))


def tanh(a):
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, (a,), "tanh", lambda g: (g * (1.0 - out * out),))


def softplus(a):
    """log(1 + e^x), evaluated without overflow."""
    a = as_tensor(a)
    out = np.logaddexp(0.0, a.data)
    return _make(out, (a,), "softplus", lambda g: (g * (0.5 * (1.0 + np.tanh(0.5 * a.data))),))


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a):
    """tanh approximation of GELU."""
    a = as_tensor(a)
    x = a.data
    u = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(u)
    out = 0.5 * x * (1.0 + t)

    def bw(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du),)
    return _make(out, (a,), "gelu", bw)


# --- reductions and shape ---------------------------------------------------

def sum(a, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)
    return _make(out, (a,), "sum", bw)


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    n = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return scale(sum(a, axis, keepdims), 1.0 / n)


def reshape(a, shape):
    a = as_tensor(a)
    return _make(a.data.reshape(shape), (a,), "reshape", lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None):
    a = as_tensor(a)
    if axes is None:
        axes = tuple(range(a.ndim))[::-1]
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), (a,), "transpose", lambda g: (g.transpose(inv),))


def _is_basic_index(idx):
    idx = idx if isinstance(idx, tuple) else (idx,)
    return all(i is Ellipsis or i is None or isinstance(i, (slice, int, np.integer)) for i in idx)


def _getitem(a, idx):
    out = a.data[idx]
    basic = _is_basic_index(idx)

    def bw(g):
        full = np.zeros_like(a.data)
        if basic:
            full[idx] += g
        else:
            np.add.at(full, idx, g)
        return (full,)
    return _make(np.array(out), (a,), "getitem", bw)


def stack(items: Sequence[Tensor], axis=0):
    items = [as_tensor(t) for t in items]
    out = np.stack([t.data for t in items], axis=axis)

    def bw(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(items)))
    return _make(out, items, "stack", bw)


def concatenate(items: Sequence[Tensor], axis=0):
    items = [as_tensor(t) for t in items]
    out = np.concatenate([t.data for t in items], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in items])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))
    return _make(out, items, "concatenate", bw)


# --- linear algebra and fused kernels ---------------------------------------

def matmul(a, b):
    """Batched contraction over the last axis of ``a`` and second-to-last of ``b``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-D, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(
            f"matmul: inner dimensions differ, {a.shape} @ {b.shape} "
            f"({a.shape[-1]} != {b.shape[-2]})")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: batch dimensions {a.shape[:-2]} and {b.shape[:-2]} "
                         "are not broadcastable") from None
    out = a.data @ b.data

    def bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)
    return _make(out, (a, b), "matmul", bw)


def softmax_lastdim(x):
    x = as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)
    return _make(s, (x,), "softmax", bw)


def layer_norm(x, gain=None, bias=None, eps=1e-5):
    x = as_tensor(x)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat
    parents = [x]
    if gain is not None:
        gain = as_tensor(gain)
        out = out * gain.data
        parents.append(gain)
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data
        parents.append(bias)

    def bw(g):
        gx = g * gain.data if gain is not None else g
        d = x.shape[-1]
        dx = rstd / d * (d * gx - gx.sum(-1, keepdims=True)
                         - xhat * (gx * xhat).sum(-1, keepdims=True))
        grads = [dx]
        if gain is not None:
            grads.append(_unbroadcast(g * xhat, gain.shape))
        if bias is not None:
            grads.append(_unbroadcast(g, bias.shape))
        return tuple(grads)
    return _make(out, parents, "layer_norm", bw)


def cross_entropy(logits, labels):
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    n = labels.shape[0]
    loss = -logp[np.arange(n), labels].mean()

    def bw(g):
        p = np.exp(logp)
        p[np.arange(n), labels] -= 1.0
        return (g * p / n,)
    return _make(loss, (logits,), "cross_entropy", bw)


# --- reverse sweep ------------------------------------------------------------

def _reachable(root):
    seen = {}
    stack_ = [root]
    while stack_:
        node = stack_.pop()
        if node.id in seen or not node.requires_grad:
            continue
        seen[node.id] = node
        stack_.extend(node.parents)
    return [seen[k] for k in sorted(seen, reverse=True)]


def backward(loss: Tensor):
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    Returns a dict mapping parameter names (or ids for unnamed leaves) to the
    accumulated gradient arrays.
    """
    if loss.size != 1:
        raise ShapeError(f"backward: loss must be a scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return {}
    adj = {loss.id: np.ones_like(loss.data)}
    leaves = {}
    for node in _reachable(loss):
        g = adj.pop(node.id, None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g if node.grad is None else node.grad + g
            leaves[node.name or node.id] = node.grad
            continue
        for parent, pg in zip(node.parents, node._backward(g)):
            if not parent.requires_grad:
                continue
            if parent.id in adj:
                adj[parent.id] = adj[parent.id] + pg
            else:
                adj[parent.id] = pg
    return leaves


# --- finite-difference gradient check -----------------------------------------

@dataclass
class GradCheckReport:
    passed: bool
    max_rel_error: float
    tol: float
    per_parameter: dict = field(default_factory=dict)
    worst: list = field(default_factory=list)

    def __str__(self):
        lines = [f"grad_check {'PASS' if self.passed else 'FAIL'}: "
                 f"max rel error {self.max_rel_error:.3e} (tol {self.tol:.1e})"]
        for name, idx, ad, fd, err in self.worst:
            lines.append(f"  {name}{list(idx)}: autodiff {ad:.10e} fd {fd:.10e} rel {err:.3e}")
        return "\n".join(lines)


def grad_check(f: Callable[[], Tensor], params: Sequence[Parameter], eps=1e-5, tol=1e-4,
               n_worst=5) -> GradCheckReport:
    """Compare tape gradients of the scalar ``f()`` against central differences.

    The relative error of each entry is |g_ad - g_fd| / max(1, |g_ad|, |g_fd|).
    """
    for p in params:
        p.zero_grad()
    backward(f())
    analytic = {id(p): p.grad.copy() for p in params}

    rows = []
    per_param = {}
    for k, p in enumerate(params):
        name = p.name or f"param{k}"
        worst_here = 0.0
        flat = p.data.reshape(-1)
        g_ad = analytic[id(p)].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = f().item()
            flat[i] = orig - eps
            fm = f().item()
            flat[i] = orig
            g_fd = (fp - fm) / (2 * eps)
            err = abs(g_ad[i] - g_fd) / max(1.0, abs(g_ad[i]), abs(g_fd))
            worst_here = max(worst_here, err)
            rows.append((err, name, np.unravel_index(i, p.shape), g_ad[i], g_fd))
        per_param[name] = worst_here
    rows.sort(key=lambda r: -r[0])
    max_err = rows[0][0] if rows else 0.0
    worst = [(name, tuple(int(j) for j in idx), float(ad), float(fd), float(err))
             for err, name, idx, ad, fd in rows[:n_worst]]
    return GradCheckReport(max_err <= tol, float(max_err), tol, per_param, worst)

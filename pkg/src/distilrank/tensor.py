"""Dense float tensors with reverse-mode gradients.

A :class:`Tensor` wraps a numpy array.  Every op records a closure that maps
the output gradient to gradients for its inputs; :meth:`Tensor.backward`
walks the recorded graph in reverse topological order.  Gradients accumulate
into ``.grad`` until the caller resets them (``zero_grad``).
"""

from __future__ import annotations

import contextlib
import math

import numpy as np
from scipy import special

from .errors import DomainError, ShapeError, UsageError

_GRAD_ENABLED = True

PROB_TOL = 1e-9


@contextlib.contextmanager
def no_grad():
    """Run ops without recording the graph (inference, frozen teachers)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


def _as_array(data, dtype=None):
    arr = np.asarray(data)
    if dtype is not None:
        return arr.astype(dtype, copy=False)
    if not np.issubdtype(arr.dtype, np.floating):
        arr = arr.astype(np.float64)
    return arr


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        self.data = _as_array(data, dtype)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward = None
        self.name = name

    # -- basic protocol -------------------------------------------------
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
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self):
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    # -- graph ----------------------------------------------------------
    def backward(self):
        """Populate ``.grad`` on every grad-requiring tensor feeding this scalar."""
        if self.data.size != 1:
            raise UsageError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise UsageError("backward() on a tensor that does not require grad")

        order = []
        seen = set()
        stack = [(self, False)]
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
                if id(parent) not in seen:
                    stack.append((parent, False))

        pending = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            node.grad = g.copy() if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            for parent, pg in node._backward(g):
                if pg is None:
                    continue
                key = id(parent)
                if key in pending:
                    pending[key] = pending[key] + pg
                else:
                    pending[key] = pg

    # -- operators ------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_lift(other, self)))

    def __rsub__(self, other):
        return add(_lift(other, self), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, reciprocal(other))
        return mul(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return take(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def _lift(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype) if dtype is not None else x)


def _result(data, parents, backward) -> Tensor:
    out = Tensor(data)
    live = tuple(p for p in parents if p.requires_grad)
    if _GRAD_ENABLED and live:
        out.requires_grad = True
        out._parents = live
        out._backward = backward
    return out


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, "broadcast-compatible shapes", (a.shape, b.shape)) from None


# -- elementwise ----------------------------------------------------------

def add(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    _broadcast_shape("add", a, b)

    def backward(g):
        return [(a, _unbroadcast(g, a.shape) if a.requires_grad else None),
                (b, _unbroadcast(g, b.shape) if b.requires_grad else None)]

    return _result(a.data + b.data, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: [(a, -g)])


def mul(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    _broadcast_shape("mul", a, b)

    def backward(g):
        return [(a, _unbroadcast(g * b.data, a.shape) if a.requires_grad else None),
                (b, _unbroadcast(g * a.data, b.shape) if b.requires_grad else None)]

    return _result(a.data * b.data, (a, b), backward)


def reciprocal(a: Tensor) -> Tensor:
    out = 1.0 / a.data
    return _result(out, (a,), lambda g: [(a, -g * out * out)])


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: [(a, g * out)])


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise DomainError("log of non-positive value")
    return _result(np.log(a.data), (a,), lambda g: [(a, g / a.data)])


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _result(out, (a,), lambda g: [(a, g * (1.0 - out * out))])


def sigmoid(a: Tensor) -> Tensor:
    out = special.expit(a.data)
    return _result(out, (a,), lambda g: [(a, g * out * (1.0 - out))])


_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(a: Tensor) -> Tensor:
    """Exact (erf) GELU."""
    x = a.data
    cdf = special.ndtr(x)

    def backward(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * x * x)
        return [(a, g * (cdf + x * pdf))]

    return _result(x * cdf, (a,), backward)


# -- shape ----------------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", f"{a.size} elements", shape) from None
    return _result(out, (a,), lambda g: [(a, g.reshape(src))])


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _result(a.data.transpose(axes), (a,), lambda g: [(a, g.transpose(inv))])


def _is_basic_index(idx):
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis
               for i in items)


def take(a: Tensor, idx) -> Tensor:
    out = a.data[idx]
    basic = _is_basic_index(idx)

    def backward(g):
        full = np.zeros_like(a.data)
        if basic:
            full[idx] += g
        else:
            np.add.at(full, idx, g)
        return [(a, full)]

    return _result(np.array(out, copy=True) if basic else out, (a,), backward)


def concat(tensors, axis=-1) -> Tensor:
    tensors = [_lift(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError("concat", "matching non-concat dims", [t.shape for t in tensors]) from exc
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return list(zip(tensors, np.split(g, sizes, axis=axis)))

    return _result(out, tensors, backward)


# -- reductions -----------------------------------------------------------

def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return [(a, np.broadcast_to(g, a.shape).copy())]

    return _result(out, (a,), backward)


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    if axis is None:
        n = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([a.shape[ax] for ax in axes]))
    return tsum(a, axis, keepdims) * (1.0 / n)


# -- linear algebra -------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    if a.ndim < 1 or b.ndim < 1:
        raise ShapeError("matmul", "operands with ndim >= 1", (a.shape, b.shape))
    k_a = a.shape[-1]
    k_b = b.shape[0] if b.ndim == 1 else b.shape[-2]
    if k_a != k_b:
        raise ShapeError("matmul", f"inner dims equal ({k_a} vs {k_b})", (a.shape, b.shape))
    if b.ndim == 2 and a.ndim > 2:
        return _matmul_weight(a, b)
    out = np.matmul(a.data, b.data)

    def backward(g):
        ad = a.data[None, :] if a.ndim == 1 else a.data
        bd = b.data[:, None] if b.ndim == 1 else b.data
        gg = g
        if a.ndim == 1:
            gg = np.expand_dims(gg, -2)
        if b.ndim == 1:
            gg = np.expand_dims(gg, -1)
        ga = gb = None
        if a.requires_grad:
            ga = np.matmul(gg, np.swapaxes(bd, -1, -2))
            ga = _unbroadcast(ga, ad.shape).reshape(a.shape)
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(ad, -1, -2), gg)
            gb = _unbroadcast(gb, bd.shape).reshape(b.shape)
        return [(a, ga), (b, gb)]

    return _result(out, (a, b), backward)


def _matmul_weight(a: Tensor, w: Tensor) -> Tensor:
    """``[..., k] @ [k, n]`` as one flattened GEMM in both directions."""
    lead = a.shape[:-1]
    a2 = a.data.reshape(-1, a.shape[-1])
    out = (a2 @ w.data).reshape(*lead, w.shape[1])

    def backward(g):
        g2 = g.reshape(-1, w.shape[1])
        ga = (g2 @ w.data.T).reshape(a.shape) if a.requires_grad else None
        gw = a2.T @ g2 if w.requires_grad else None
        return [(a, ga), (w, gw)]

    return _result(out, (a, w), backward)


def embedding(weight: Tensor, ids) -> Tensor:
    """Row lookup ``weight[ids]`` with scatter-add gradient."""
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise DomainError("embedding ids must be integers")
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise DomainError(f"embedding id out of range [0, {weight.shape[0]})")

    def backward(g):
        full = np.zeros_like(weight.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, weight.shape[-1]))
        return [(weight, full)]

    return _result(weight.data[ids], (weight,), backward)


# -- normalisation / activations ------------------------------------------

def softmax(a: Tensor, mask=None) -> Tensor:
    """Softmax over the last axis.

    ``mask`` (broadcastable booleans, True = keep) pins masked entries to an
    exact zero probability.
    """
    x = a.data
    if mask is not None:
        x = np.where(mask, x, -np.inf)
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return [(a, out * (g - (g * out).sum(axis=-1, keepdims=True)))]

    return _result(out, (a,), backward)


def log_softmax(a: Tensor) -> Tensor:
    x = a.data
    lse = special.logsumexp(x, axis=-1, keepdims=True)
    out = x - lse

    def backward(g):
        p = np.exp(out)
        return [(a, g - p * g.sum(axis=-1, keepdims=True))]

    return _result(out, (a,), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-12) -> Tensor:
    """Normalise over the last axis, then scale by ``gain`` and shift by ``bias``."""
    h = x.shape[-1]
    if gain.shape != (h,) or bias.shape != (h,):
        raise ShapeError("layer_norm", f"gain/bias of shape ({h},)", (gain.shape, bias.shape))
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def backward(g):
        lead = tuple(range(g.ndim - 1))
        res = []
        if x.requires_grad:
            dxhat = g * gain.data
            dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
            res.append((x, dx))
        if gain.requires_grad:
            res.append((gain, (g * xhat).sum(axis=lead)))
        if bias.requires_grad:
            res.append((bias, g.sum(axis=lead)))
        return res

    return _result(out, (x, gain, bias), backward)


# -- losses ---------------------------------------------------------------

def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean categorical cross-entropy of ``[N, C]`` logits against int targets."""
    targets = np.asarray(targets)
    if logits.ndim != 2 or targets.shape != (logits.shape[0],):
        raise ShapeError("cross_entropy", "logits [N, C] and targets [N]",
                         (logits.shape, targets.shape))
    n = logits.shape[0]
    if n == 0:
        raise UsageError("cross_entropy over zero rows")
    x = logits.data
    lse = special.logsumexp(x, axis=-1)
    rows = np.arange(n)
    loss = (lse - x[rows, targets]).mean()

    def backward(g):
        p = np.exp(x - lse[:, None])
        p[rows, targets] -= 1.0
        return [(logits, p * (g / n))]

    return _result(np.asarray(loss), (logits,), backward)


def bce_with_logits(logits: Tensor, labels) -> Tensor:
    """Mean sigmoid cross-entropy."""
    y = np.asarray(labels, dtype=logits.dtype)
    if y.shape != logits.shape:
        raise ShapeError("bce_with_logits", logits.shape, y.shape)
    x = logits.data
    n = x.size
    loss = (np.maximum(x, 0) - x * y + np.log1p(np.exp(-np.abs(x)))).mean()

    def backward(g):
        return [(logits, (special.expit(x) - y) * (g / n))]

    return _result(np.asarray(loss), (logits,), backward)


def _check_distribution(name, arr):
    if not np.all(np.isfinite(arr)):
        raise DomainError(f"{name} contains non-finite values")
    if np.any(arr < 0):
        raise DomainError(f"{name} has negative probabilities")
    sums = arr.sum(axis=-1)
    if np.any(np.abs(sums - 1.0) > PROB_TOL):
        raise DomainError(f"{name} rows do not sum to 1 (max deviation "
                          f"{np.abs(sums - 1.0).max():.3g})")


def kl_divergence(p: Tensor, q: Tensor) -> Tensor:
    """KL(p || q) over the last axis, averaged over any leading axes."""
    p, q = _lift(p), _lift(q)
    if p.shape != q.shape:
        raise ShapeError("kl_divergence", p.shape, q.shape)
    _check_distribution("p", p.data)
    _check_distribution("q", q.data)
    support = p.data > 0
    if np.any(support & (q.data <= 0)):
        raise DomainError("q assigns zero mass where p is positive")
    rows = max(1, p.size // p.shape[-1])
    safe_p = np.where(support, p.data, 1.0)
    safe_q = np.where(support, q.data, 1.0)
    log_ratio = np.log(safe_p) - np.log(safe_q)
    value = np.where(support, p.data * log_ratio, 0.0).sum() / rows

    def backward(g):
        scale = g / rows
        gp = np.where(support, log_ratio + 1.0, 0.0) * scale if p.requires_grad else None
        gq = np.where(support, -p.data / safe_q, 0.0) * scale if q.requires_grad else None
        return [(p, gp), (q, gq)]

    return _result(np.asarray(value), (p, q), backward)


def mse(a: Tensor, b) -> Tensor:
    b = _lift(b, a)
    if a.shape != b.shape:
        raise ShapeError("mse", a.shape, b.shape)
    d = a - b
    return mean(d * d)

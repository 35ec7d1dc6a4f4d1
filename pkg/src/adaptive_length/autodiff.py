"""Tape-based reverse-mode automatic differentiation over float64 numpy arrays.

Every operation whose inputs require gradients is appended to the active
:class:`Tape`. Because a node is recorded only after all of its inputs exist,
the tape is already in topological order and ``backward`` simply walks it in
reverse. Outside a ``with Tape():`` block nothing is recorded, which is the
inference mode used by the adaptive forward pass.

    >>> x = Value(3.0, requires_grad=True)
    >>> with Tape() as tape:
    ...     y = x * x
    ...     tape.backward(y)
    >>> float(x.grad)
    6.0
"""

from __future__ import annotations

import contextvars
import math

import numpy as np

from .errors import ConfigError, NumericDomainError, UsageError

DTYPE = np.float64
PROB_EPS = 1e-12

_active_tape: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar(
    "active_tape", default=None
)


class Value:
    """A node of the computation graph holding a dense array and its gradient."""

    __slots__ = ("data", "_grad", "requires_grad", "parents", "_backward", "_touched", "name")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = bool(requires_grad)
        self._grad = None
        self.parents: tuple[Value, ...] = ()
        self._backward = None
        self._touched = False
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def grad(self):
        # allocated lazily; reads as zeros until something accumulates
        if self._grad is None:
            self._grad = np.zeros_like(self.data)
        return self._grad

    @grad.setter
    def grad(self, value):
        self._grad = value

    def zero_grad(self):
        self._grad = None
        self._touched = False

    def item(self):
        return float(self.data)

    def numpy(self):
        return self.data

    def __repr__(self):
        tag = f" {self.name}" if self.name else ""
        return f"Value{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar
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
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def _accumulate(self, g):
        if not self.requires_grad:
            return
        if self._grad is None:
            self._grad = np.array(g, dtype=DTYPE) if g.shape != self.data.shape or not g.flags.writeable else g
        else:
            self._grad = self._grad + g
        self._touched = True


class Tape:
    """Ordered record of the operations of one forward pass.

    A tape may be consumed by exactly one backward pass; it is cleared
    afterwards. Tapes are tracked with a context variable so independent
    threads can each hold their own.
    """

    def __init__(self):
        self.nodes: list[Value] = []
        self._token = None
        self.consumed = False

    def __enter__(self):
        self._token = _active_tape.set(self)
        return self

    def __exit__(self, *exc):
        _active_tape.reset(self._token)
        self._token = None
        return False

    def record(self, node):
        if self.consumed:
            raise UsageError("tape was already consumed by a backward pass")
        self.nodes.append(node)

    def backward(self, root):
        if self.consumed:
            raise UsageError("tape was already consumed by a backward pass")
        if root.data.size != 1:
            raise UsageError(f"backward needs a scalar root, got shape {root.shape}")
        if root.requires_grad:
            root._accumulate(np.ones_like(root.data))
            for node in reversed(self.nodes):
                if node._touched and node._backward is not None:
                    node._backward(node.grad)
        # free intermediate buffers; leaves keep their accumulated grads
        for node in self.nodes:
            node._backward = None
            node.parents = ()
        self.nodes.clear()
        self.consumed = True


def current_tape():
    return _active_tape.get()


def backward(root):
    """Run a backward pass from ``root`` on the currently active tape."""
    tape = current_tape()
    if tape is None:
        raise UsageError("backward() called outside of an active Tape")
    tape.backward(root)


class no_grad:
    """Suspend recording, e.g. to evaluate a function inside an open tape."""

    def __enter__(self):
        self._token = _active_tape.set(None)
        return self

    def __exit__(self, *exc):
        _active_tape.reset(self._token)
        return False


class frozen:
    """Temporarily mark parameters as not requiring gradients."""

    def __init__(self, params):
        self.params = list(params)

    def __enter__(self):
        self._saved = [p.requires_grad for p in self.params]
        for p in self.params:
            p.requires_grad = False
        return self

    def __exit__(self, *exc):
        for p, flag in zip(self.params, self._saved):
            p.requires_grad = flag
        return False


def as_value(x):
    return x if isinstance(x, Value) else Value(x)


def _result(data, parents, backward_fn):
    out = Value(data)
    tape = current_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = tuple(parents)
        out._backward = backward_fn
        tape.record(out)
    return out


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` after numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_shape(a, b, opname):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ConfigError(f"{opname}: shapes {a.shape} and {b.shape} do not broadcast") from exc


# ---------------------------------------------------------------- elementwise


def add(a, b):
    a, b = as_value(a), as_value(b)
    _broadcast_shape(a, b, "add")

    def bw(g):
        a._accumulate(_unbroadcast(g, a.shape))
        b._accumulate(_unbroadcast(g, b.shape))

    return _result(a.data + b.data, (a, b), bw)


def sub(a, b):
    a, b = as_value(a), as_value(b)
    _broadcast_shape(a, b, "sub")

    def bw(g):
        a._accumulate(_unbroadcast(g, a.shape))
        b._accumulate(_unbroadcast(-g, b.shape))

    return _result(a.data - b.data, (a, b), bw)


def mul(a, b):
    a, b = as_value(a), as_value(b)
    _broadcast_shape(a, b, "mul")

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _result(a.data * b.data, (a, b), bw)


def div(a, b):
    a, b = as_value(a), as_value(b)
    _broadcast_shape(a, b, "div")
    out = a.data / b.data

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g * out / b.data, b.shape))

    return _result(out, (a, b), bw)


def scale(a, c):
    """Multiply by a Python scalar."""
    a = as_value(a)
    c = float(c)
    return _result(a.data * c, (a,), lambda g: a._accumulate(g * c))


def exp(a):
    a = as_value(a)
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: a._accumulate(g * out))


def log(a):
    a = as_value(a)
    if np.any(a.data <= 0):
        raise NumericDomainError("log of a nonpositive value; clamp with clamp_min first")
    return _result(np.log(a.data), (a,), lambda g: a._accumulate(g / a.data))


def tanh(a):
    a = as_value(a)
    out = np.tanh(a.data)
    return _result(out, (a,), lambda g: a._accumulate(g * (1.0 - out * out)))


def sigmoid(a):
    a = as_value(a)
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _result(out, (a,), lambda g: a._accumulate(g * out * (1.0 - out)))


def softplus(a):
    a = as_value(a)
    out = np.logaddexp(0.0, a.data)
    sig = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _result(out, (a,), lambda g: a._accumulate(g * sig))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a):
    """tanh approximation of GELU."""
    a = as_value(a)
    x = a.data
    x2 = x * x
    inner = _GELU_C * x * (1.0 + 0.044715 * x2)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        a._accumulate(g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner))

    return _result(out, (a,), bw)


def clamp_min(a, lo=PROB_EPS):
    a = as_value(a)
    keep = a.data >= lo
    return _result(np.where(keep, a.data, lo), (a,), lambda g: a._accumulate(g * keep))


def where(cond, a, b):
    """Select ``a`` where ``cond`` holds, else ``b``; ``cond`` is a constant boolean array."""
    a, b = as_value(a), as_value(b)
    cond = np.asarray(cond, dtype=bool)

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(np.where(cond, g, 0.0), a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(np.where(cond, 0.0, g), b.shape))

    return _result(np.where(cond, a.data, b.data), (a, b), bw)


def detach(a):
    return Value(as_value(a).data)


# ---------------------------------------------------------------- reductions / shapes


def sum(a, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy
    a = as_value(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(g, a.shape))

    return _result(out, (a,), bw)


def mean(a, axis=None, keepdims=False):
    a = as_value(a)
    count = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(a, shape):
    a = as_value(a)
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ConfigError(f"reshape: cannot view {a.shape} as {shape}") from exc
    return _result(out, (a,), lambda g: a._accumulate(g.reshape(a.shape)))


def transpose(a, axes):
    a = as_value(a)
    inv = np.argsort(axes)
    return _result(a.data.transpose(axes), (a,), lambda g: a._accumulate(g.transpose(inv)))


def getitem(a, index):
    a = as_value(a)
    parts = index if isinstance(index, tuple) else (index,)
    fancy = any(isinstance(p, (np.ndarray, list)) for p in parts)

    def bw(g):
        full = np.zeros_like(a.data)
        if fancy:
            np.add.at(full, index, g)
        else:
            full[index] += g
        a._accumulate(full)

    return _result(a.data[index], (a,), bw)


def embedding(table, ids):
    """Row lookup ``table[ids]`` with scatter-add backward."""
    table = as_value(table)
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ConfigError(f"embedding: ids outside [0, {table.shape[0]})")

    def bw(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        table._accumulate(full)

    return _result(table.data[ids], (table,), bw)


def concat(values, axis=0):
    values = [as_value(v) for v in values]
    sizes = [v.shape[axis] for v in values]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        for v, part in zip(values, np.split(g, splits, axis=axis)):
            v._accumulate(part)

    return _result(np.concatenate([v.data for v in values], axis=axis), values, bw)


# ---------------------------------------------------------------- linear algebra


def matmul(a, b):
    a, b = as_value(a), as_value(b)
    if a.ndim < 1 or b.ndim < 1 or a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ConfigError(f"matmul: inner dimensions of {a.shape} and {b.shape} differ")
    out = np.matmul(a.data, b.data)

    def bw(g):
        ad, bd = a.data, b.data
        if ad.ndim == 1 or bd.ndim == 1:
            # vector operands: promote, differentiate, demote
            a2 = ad[None, :] if ad.ndim == 1 else ad
            b2 = bd[:, None] if bd.ndim == 1 else bd
            g2 = g
            if ad.ndim == 1:
                g2 = np.expand_dims(g2, -2)
            if bd.ndim == 1:
                g2 = np.expand_dims(g2, -1)
            if a.requires_grad:
                a._accumulate(_unbroadcast(g2 @ np.swapaxes(b2, -1, -2), a2.shape).reshape(a.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(np.swapaxes(a2, -1, -2) @ g2, b2.shape).reshape(b.shape))
            return
        if a.requires_grad:
            a._accumulate(_unbroadcast(g @ np.swapaxes(bd, -1, -2), a.shape))
        if b.requires_grad:
            if bd.ndim == 2:
                k = ad.shape[-1]
                b._accumulate(ad.reshape(-1, k).T @ g.reshape(-1, bd.shape[1]))
            else:
                b._accumulate(_unbroadcast(np.swapaxes(ad, -1, -2) @ g, b.shape))

    return _result(out, (a, b), bw)


def linear(x, w, b=None):
    y = matmul(x, w)
    return y if b is None else add(y, b)


def l2_norm(a):
    """Euclidean norm over the last axis."""
    a = as_value(a)
    out = np.sqrt((a.data * a.data).sum(axis=-1))

    def bw(g):
        safe = np.where(out > 0, out, 1.0)
        a._accumulate(g[..., None] * np.where(out[..., None] > 0, a.data / safe[..., None], 0.0))

    return _result(out, (a,), bw)


# ---------------------------------------------------------------- probability


def softmax(a, axis=-1):
    a = as_value(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        a._accumulate(out * (g - (g * out).sum(axis=axis, keepdims=True)))

    return _result(out, (a,), bw)


def log_softmax(a, axis=-1):
    a = as_value(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    probs = np.exp(out)

    def bw(g):
        a._accumulate(g - probs * g.sum(axis=axis, keepdims=True))

    return _result(out, (a,), bw)


def cross_entropy(logits, targets):
    """Mean negative log-likelihood of integer ``targets`` under row-wise softmax."""
    logits = as_value(logits)
    targets = np.asarray(targets, dtype=np.int64)
    if logits.ndim != 2 or targets.shape != (logits.shape[0],):
        raise ConfigError(f"cross_entropy: logits {logits.shape} vs targets {targets.shape}")
    if targets.min() < 0 or targets.max() >= logits.shape[1]:
        raise ConfigError("cross_entropy: target class out of range")
    logp = log_softmax(logits)
    picked = getitem(logp, (np.arange(len(targets)), targets))
    return scale(sum(picked), -1.0 / len(targets))


def kl_divergence(p, q):
    """KL(p || q) summed over the last axis; ``p`` is the reference distribution.

    Terms with ``p == 0`` contribute zero. ``q`` must be strictly positive:
    clamp it with :func:`clamp_min` beforehand.
    """
    p, q = as_value(p), as_value(q)
    _broadcast_shape(p, q, "kl_divergence")
    if np.any(p.data < 0):
        raise NumericDomainError("kl_divergence: reference has negative mass")
    if np.any(q.data <= 0):
        raise NumericDomainError("kl_divergence: nonpositive probability in q; clamp first")
    pos = p.data > 0
    safe_p = np.where(pos, p.data, 1.0)
    terms = np.where(pos, p.data * (np.log(safe_p) - np.log(q.data)), 0.0)
    out = terms.sum(axis=-1)

    def bw(g):
        g = g[..., None]
        if p.requires_grad:
            p._accumulate(_unbroadcast(np.where(pos, g * (np.log(safe_p) - np.log(q.data) + 1.0), 0.0), p.shape))
        if q.requires_grad:
            q._accumulate(_unbroadcast(-g * p.data / q.data, q.shape))

    return _result(out, (p, q), bw)


def layer_norm(x, gamma, beta, eps=1e-12):
    """Normalize over the last axis then apply the affine map."""
    x, gamma, beta = as_value(x), as_value(gamma), as_value(beta)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def bw(g):
        if gamma.requires_grad:
            gamma._accumulate(_unbroadcast(g * xhat, gamma.shape))
        if beta.requires_grad:
            beta._accumulate(_unbroadcast(g, beta.shape))
        if x.requires_grad:
            gx = g * gamma.data
            x._accumulate(
                inv * (gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
            )

    return _result(out, (x, gamma, beta), bw)


# ---------------------------------------------------------------- gradient checking


def finite_difference_check(f, point, step=1e-5, max_coords=None, rng=None):
    """Compare autodiff gradients of scalar ``f`` with central differences.

    ``point`` is a list of arrays; ``f`` receives one :class:`Value` per array
    and must return a scalar Value. Returns the max over checked coordinates of
    ``|analytic - numeric| / (|analytic| + |numeric| + 1e-12)``.
    When ``max_coords`` is set, that many coordinates are sampled per array.
    """
    arrays = [np.array(p, dtype=DTYPE) for p in point]
    params = [Value(a.copy(), requires_grad=True) for a in arrays]
    with Tape() as tape:
        out = f(*params)
        tape.backward(out)
    analytic = [p.grad.copy() for p in params]

    def evaluate():
        with no_grad():
            return float(f(*[Value(a) for a in arrays]).data)

    worst = 0.0
    for k, arr in enumerate(arrays):
        flat = arr.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            rng = rng if rng is not None else np.random.default_rng(0)
            coords = rng.choice(flat.size, size=max_coords, replace=False)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + step
            hi = evaluate()
            flat[i] = orig - step
            lo = evaluate()
            flat[i] = orig
            numeric = (hi - lo) / (2 * step)
            a = analytic[k].reshape(-1)[i]
            worst = max(worst, abs(a - numeric) / (abs(a) + abs(numeric) + 1e-12))
    return worst

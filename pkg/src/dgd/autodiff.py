"""Minimal reverse-mode automatic differentiation on dense float64 arrays.

Every differentiable operation appends a node to the active :class:`Tape`;
:func:`backward` replays the tape in reverse and accumulates gradients into
the leaf arrays (the trainable parameters).  The tape is rebuilt on every
forward pass and cleared after each backward pass.

Example
-------
>>> x = DiffArray(3.0, requires_grad=True)
>>> loss = x * x
>>> backward(loss)
>>> float(x.grad)
6.0
"""

from contextlib import contextmanager

import numpy as np

from dgd import backend
from dgd.errors import ContractError, DimensionError, NumericDomainError

LOG_FLOOR = 1e-10
PROB_EPS = 1e-6


class DiffArray:
    """Dense float64 array with an accumulated-gradient buffer.

    Leaves are created by the user; only leaves with ``requires_grad`` own a
    ``grad`` buffer.  Arrays produced by operations carry no buffer; their
    adjoints live only inside :func:`backward`.
    """

    __slots__ = ("values", "grad", "requires_grad", "is_leaf", "name")

    def __init__(self, values, requires_grad=False, name=None):
        self.values = np.array(values, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.is_leaf = True
        self.grad = np.zeros_like(self.values) if self.requires_grad else None
        self.name = name

    @classmethod
    def _result(cls, values, requires_grad):
        out = cls.__new__(cls)
        out.values = np.asarray(values, dtype=np.float64)
        out.requires_grad = requires_grad
        out.is_leaf = False
        out.grad = None
        out.name = None
        return out

    @property
    def shape(self):
        return self.values.shape

    @property
    def ndim(self):
        return self.values.ndim

    @property
    def size(self):
        return self.values.size

    def item(self):
        return float(self.values)

    def numpy(self):
        return self.values.copy()

    def zero_grad(self):
        if self.grad is not None:
            self.grad.fill(0.0)

    def set_requires_grad(self, flag):
        """Toggle gradient tracking on a leaf, (de)allocating its buffer."""
        if not self.is_leaf:
            raise ContractError("requires_grad can only be changed on leaves")
        self.requires_grad = bool(flag)
        if self.requires_grad and self.grad is None:
            self.grad = np.zeros_like(self.values)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"DiffArray(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

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

    def __neg__(self):
        return negate(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)


class _Node:
    __slots__ = ("out", "inputs", "backward_fn")

    def __init__(self, out, inputs, backward_fn):
        self.out = out
        self.inputs = inputs
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of operations for one forward pass."""

    def __init__(self):
        self.nodes = []
        self.enabled = True

    def __len__(self):
        return len(self.nodes)

    def record(self, out, inputs, backward_fn):
        self.nodes.append(_Node(out, inputs, backward_fn))

    def clear(self):
        self.nodes.clear()

    def backward(self, loss):
        if not isinstance(loss, DiffArray) or loss.size != 1:
            shape = getattr(loss, "shape", None)
            raise ContractError(f"backward needs a scalar loss, got shape {shape}")
        if loss.is_leaf:
            if loss.requires_grad:
                loss.grad += 1.0
            self.clear()
            return
        if not self.nodes:
            raise ContractError("backward called on an empty tape")
        adjoints = {id(loss): np.ones_like(loss.values)}
        for node in reversed(self.nodes):
            g = adjoints.pop(id(node.out), None)
            if g is None:
                continue
            grads = node.backward_fn(g)
            for inp, gi in zip(node.inputs, grads):
                if gi is None or not inp.requires_grad:
                    continue
                if inp.is_leaf:
                    inp.grad += gi
                else:
                    key = id(inp)
                    prev = adjoints.get(key)
                    adjoints[key] = gi if prev is None else prev + gi
        self.clear()


_TAPE = Tape()


def get_tape():
    return _TAPE


@contextmanager
def no_grad():
    """Disable recording; results of ops inside never require grad."""
    prev = _TAPE.enabled
    _TAPE.enabled = False
    try:
        yield
    finally:
        _TAPE.enabled = prev


def backward(loss):
    """Accumulate d(loss)/d(leaf) into every reachable leaf and clear the tape."""
    _TAPE.backward(loss)


def zero_grad(params):
    for p in params:
        p.zero_grad()


def as_diff(x):
    return x if isinstance(x, DiffArray) else DiffArray(x)


def _emit(values, inputs, backward_fn):
    needs = _TAPE.enabled and any(i.requires_grad for i in inputs)
    out = DiffArray._result(values, needs)
    if needs:
        _TAPE.record(out, inputs, backward_fn)
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    ndiff = g.ndim - len(shape)
    if ndiff > 0:
        g = g.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(a, b, opname):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(
            f"{opname}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------- binary ops

def add(a, b):
    a, b = as_diff(a), as_diff(b)
    _check_broadcast(a, b, "add")
    return _emit(a.values + b.values, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b):
    a, b = as_diff(a), as_diff(b)
    _check_broadcast(a, b, "sub")
    return _emit(a.values - b.values, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b):
    a, b = as_diff(a), as_diff(b)
    _check_broadcast(a, b, "mul")
    av, bv = a.values, b.values
    return _emit(av * bv, (a, b),
                 lambda g: (_unbroadcast(g * bv, a.shape), _unbroadcast(g * av, b.shape)))


def matmul(a, b):
    a, b = as_diff(a), as_diff(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} are incompatible")
    av, bv = a.values, b.values
    return _emit(av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g))


# ----------------------------------------------------------- elementwise ops

def negate(x):
    x = as_diff(x)
    return _emit(-x.values, (x,), lambda g: (-g,))


def scale(x, c):
    x = as_diff(x)
    c = float(c)
    return _emit(c * x.values, (x,), lambda g: (c * g,))


def exp(x):
    x = as_diff(x)
    out = np.exp(x.values)
    return _emit(out, (x,), lambda g: (g * out,))


def log(x, floor=None):
    """Natural log; with ``floor`` the input is clamped to ``>= floor`` first."""
    x = as_diff(x)
    if floor is not None:
        x = clamp(x, lo=floor)
    v = x.values
    if np.any(~(v > 0)):
        raise NumericDomainError(f"log of non-positive value (min {np.nanmin(v)!r})")
    return _emit(np.log(v), (x,), lambda g: (g / v,))


def sigmoid(x):
    x = as_diff(x)
    v = x.values
    # split by sign to avoid exp overflow
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)
    return _emit(out, (x,), lambda g: (g * out * (1.0 - out),))


def relu(x):
    x = as_diff(x)
    mask = x.values > 0
    return _emit(np.where(mask, x.values, 0.0), (x,), lambda g: (g * mask,))


def softplus(x):
    """log(1 + e^x), computed without overflow."""
    x = as_diff(x)
    v = x.values
    out = np.logaddexp(0.0, v)

    def bw(g):
        s = np.empty_like(v)
        pos = v >= 0
        s[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
        ev = np.exp(v[~pos])
        s[~pos] = ev / (1.0 + ev)
        return (g * s,)

    return _emit(out, (x,), bw)


def clamp(x, lo=None, hi=None):
    x = as_diff(x)
    v = x.values
    out = np.clip(v, lo, hi)
    inside = np.ones(v.shape, dtype=bool)
    if lo is not None:
        inside &= v >= lo
    if hi is not None:
        inside &= v <= hi
    return _emit(out, (x,), lambda g: (g * inside,))


def log_softmax(x):
    """Log of softmax over the last axis."""
    x = as_diff(x)
    v = x.values
    shifted = v - v.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse
    sm = np.exp(out)
    return _emit(out, (x,), lambda g: (g - sm * g.sum(axis=-1, keepdims=True),))


def softmax(x):
    """Softmax over the last axis."""
    x = as_diff(x)
    v = x.values
    e = np.exp(v - v.max(axis=-1, keepdims=True))
    out = e / e.sum(axis=-1, keepdims=True)
    return _emit(out, (x,),
                 lambda g: (out * (g - (g * out).sum(axis=-1, keepdims=True)),))


_ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "exp": exp,
    "log": log,
    "sigmoid": sigmoid,
    "relu": relu,
    "softmax-lastdim": softmax,
    "negate": negate,
    "scale-by-constant": scale,
    "clamp": clamp,
    "softplus": softplus,
}


def elementwise(tag, *args, **kwargs):
    """Dispatch an elementwise op by tag name."""
    try:
        fn = _ELEMENTWISE[tag]
    except KeyError:
        raise ContractError(f"unknown elementwise op {tag!r}") from None
    return fn(*args, **kwargs)


# ---------------------------------------------------------------- reductions

def _norm_axis(axis, ndim):
    if axis is None:
        return None
    axes = (axis,) if np.isscalar(axis) else tuple(axis)
    out = []
    for a in axes:
        a = int(a)
        if not -ndim <= a < ndim:
            raise DimensionError(f"axis {a} out of range for {ndim}-d array")
        out.append(a % ndim)
    return tuple(sorted(set(out)))


def _expand(g, shape, axes):
    if axes is None:
        return np.broadcast_to(g, shape)
    return np.broadcast_to(np.expand_dims(g, axes), shape)


def sum(x, axis=None):  # noqa: A001 - mirrors numpy naming
    x = as_diff(x)
    axes = _norm_axis(axis, x.ndim)
    shape = x.shape
    return _emit(x.values.sum(axis=axes), (x,), lambda g: (_expand(g, shape, axes).copy(),))


def mean(x, axis=None):
    x = as_diff(x)
    axes = _norm_axis(axis, x.ndim)
    shape = x.shape
    n = x.size if axes is None else int(np.prod([shape[a] for a in axes]))
    return _emit(x.values.mean(axis=axes), (x,),
                 lambda g: (_expand(g, shape, axes) / n,))


def logsumexp(x, axis=None):
    """log(sum(exp(x))) with max-subtraction; finite for finite inputs."""
    x = as_diff(x)
    axes = _norm_axis(axis, x.ndim)
    v = x.values
    m = v.max(axis=axes, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    s = np.exp(v - m)
    out_keep = np.log(s.sum(axis=axes, keepdims=True)) + m
    out = out_keep.reshape(()) if axes is None else np.squeeze(out_keep, axis=axes)
    weights = np.exp(v - out_keep)
    shape = x.shape
    return _emit(out, (x,), lambda g: (_expand(g, shape, axes) * weights,))


def norm(x, axis=-1):
    """Euclidean norm along ``axis``; the gradient at the origin is zero."""
    x = as_diff(x)
    axes = _norm_axis(axis, x.ndim)
    v = x.values
    out = np.sqrt((v * v).sum(axis=axes))
    shape = x.shape

    def bw(g):
        denom = np.expand_dims(out, axes)
        safe = np.where(denom > 0, denom, 1.0)
        return (_expand(g, shape, axes) * np.where(denom > 0, v / safe, 0.0),)

    return _emit(out, (x,), bw)


_REDUCE = {"sum": sum, "mean": mean, "logsumexp": logsumexp, "norm": norm}


def reduce(tag, x, axis=None):
    try:
        fn = _REDUCE[tag]
    except KeyError:
        raise ContractError(f"unknown reduction {tag!r}") from None
    return fn(x, axis)


# ------------------------------------------------------------------ indexing

def take(x, index):
    """``x.values[index]`` with a scatter-add backward (repeated indices sum)."""
    x = as_diff(x)
    try:
        out = x.values[index]
    except IndexError as exc:
        raise DimensionError(f"take: {exc}") from None
    shape = x.shape

    def bw(g):
        full = np.zeros(shape)
        np.add.at(full, index, g)
        return (full,)

    return _emit(out, (x,), bw)


# --------------------------------------------------------------- fused ops

def gauss_logdens(z, means, neg_log_var):
    """Diagonal Gaussian log-density of each row of ``z`` under each of the
    K components, shape [B, K].  Variances are ``exp(-neg_log_var)``."""
    z, means, neg_log_var = as_diff(z), as_diff(means), as_diff(neg_log_var)
    if z.ndim != 2 or means.ndim != 2 or means.shape != neg_log_var.shape:
        raise DimensionError(
            f"gauss_logdens: bad shapes z{z.shape} means{means.shape} "
            f"neg_log_var{neg_log_var.shape}")
    if z.shape[1] != means.shape[1]:
        raise DimensionError(
            f"gauss_logdens: z has {z.shape[1]} columns, components have {means.shape[1]}")
    zv, mv, nv = z.values, means.values, neg_log_var.values
    out = backend.gauss_logdens(zv, mv, nv)
    return _emit(out, (z, means, neg_log_var),
                 lambda g: backend.gauss_logdens_backward(zv, mv, nv, g))


def nb_logpmf(mean, log_r, counts):
    """Elementwise negative binomial log-pmf, shape [B, G].

    ``mean`` [B, G] is clamped to ``>= LOG_FLOOR``; ``log_r`` [G] is the log
    dispersion; ``counts`` is a plain array.
    """
    mean, log_r = as_diff(mean), as_diff(log_r)
    x = np.asarray(counts, dtype=np.float64)
    if mean.shape != x.shape or log_r.shape != (x.shape[1],):
        raise DimensionError(
            f"nb_logpmf: mean{mean.shape} counts{x.shape} log_r{log_r.shape}")
    mu = np.maximum(mean.values, LOG_FLOOR)
    live = mean.values >= LOG_FLOOR
    r = np.exp(log_r.values)
    out = backend.nb_logpmf(x, mu, r)

    def bw(g):
        dmu, dr = backend.nb_logpmf_backward(x, mu, r, g)
        return dmu * live, dr * r

    return _emit(out, (mean, log_r), bw)

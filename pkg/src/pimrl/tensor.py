"""Minimal define-by-run reverse-mode autodiff over a fixed op set.

Tensors are unbatched: a field is ``(channels, n)`` in 1D or
``(channels, h, w)`` in 2D, parameters have whatever shape their op expects,
and reductions return 0-d tensors. There is no broadcasting; every binary op
requires equal shapes. Convolution is cross-correlation with either periodic
(wrap) or no padding.

Gradients accumulate into ``leaf.grad`` on every :func:`backward` call until
:meth:`DiffTensor.zero_grad` (or ``backward(..., reset=True)``) clears them.
"""
from __future__ import annotations

import contextlib
import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels

_ids = itertools.count()
_grad_enabled = True


class ShapeError(ValueError):
    """Raised when an op receives inputs whose shapes do not conform."""


class NonFiniteGradientError(FloatingPointError):
    """Raised by the optimizer when a gradient holds NaN or inf."""


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference rollouts)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class DiffTensor:
    __slots__ = ("id", "values", "_grad", "parents", "_backward", "requires_grad", "name")

    def __init__(self, values, requires_grad=False, name=None):
        self.id = next(_ids)
        # ascontiguousarray would promote 0-d values to shape (1,)
        self.values = np.require(np.asarray(values, dtype=np.float64), requirements="C")
        self._grad = None
        self.parents = ()
        self._backward = None
        self.requires_grad = bool(requires_grad)
        self.name = name

    @property
    def shape(self):
        return self.values.shape

    @property
    def grad(self):
        if self._grad is None:
            return np.zeros_like(self.values)
        return self._grad

    @grad.setter
    def grad(self, g):
        self._grad = None if g is None else np.asarray(g, dtype=np.float64)

    def zero_grad(self):
        self._grad = None

    def item(self):
        return float(self.values)

    def __repr__(self):
        return f"DiffTensor(id={self.id}, shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, DiffTensor):
            return mul(self, other)
        return scalar_mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scalar_mul(self, -1.0)


def as_tensor(x):
    return x if isinstance(x, DiffTensor) else DiffTensor(x)


def _make(values, inputs, backward_fn):
    out = DiffTensor(values)
    if _grad_enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.parents = tuple(inputs)
        out._backward = backward_fn
    return out


def _same_shape(kind, a, b):
    if a.shape != b.shape:
        raise ShapeError(f"{kind}: shape mismatch {a.shape} vs {b.shape}")


# ----------------------------------------------------------------------------- elementwise


def add(a, b):
    _same_shape("add", a, b)
    return _make(a.values + b.values, (a, b), lambda g: (g, g))


def sub(a, b):
    _same_shape("sub", a, b)
    return _make(a.values - b.values, (a, b), lambda g: (g, -g))


def mul(a, b):
    _same_shape("elementwise_mul", a, b)
    av, bv = a.values, b.values
    return _make(av * bv, (a, b), lambda g: (g * bv, g * av))


def scalar_mul(a, s):
    s = float(s)
    return _make(a.values * s, (a,), lambda g: (g * s,))


def tanh(a):
    y = np.tanh(a.values)
    return _make(y, (a,), lambda g: (g * (1.0 - y * y),))


def sigmoid(a):
    # split on sign so exp never overflows
    x = a.values
    y = np.empty_like(x)
    pos = x >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    y[~pos] = ex / (1.0 + ex)
    return _make(y, (a,), lambda g: (g * y * (1.0 - y),))



def channel_slice(x, start, stop):
    """Channels ``start:stop`` of a (C, *spatial) tensor."""
    C = x.shape[0]
    if not 0 <= start < stop <= C:
        raise ShapeError(f"channel_slice: [{start}:{stop}] outside {C} channels")
    shape = x.shape

    def backward(g):
        gx = np.zeros(shape)
        gx[start:stop] = g
        return (gx,)

    return _make(x.values[start:stop], (x,), backward)


def concat(tensors, axis=0):
    """Join tensors along ``axis``; other extents must agree."""
    tensors = list(tensors)
    vals = [t.values for t in tensors]
    try:
        y = np.concatenate(vals, axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {exc}") from None
    cuts = np.cumsum([v.shape[axis] for v in vals])[:-1]

    def backward(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _make(y, tuple(tensors), backward)

# ----------------------------------------------------------------------------- reductions


def tsum(a):
    shape = a.shape
    return _make(np.asarray(a.values.sum()), (a,), lambda g: (np.full(shape, float(g)),))


def mean(a):
    shape, n = a.shape, a.values.size
    return _make(np.asarray(a.values.mean()), (a,), lambda g: (np.full(shape, float(g) / n),))


def mse(a, b):
    """Mean of squared differences; ``b`` may be a constant array."""
    b = as_tensor(b)
    _same_shape("mse", a, b)
    d = a.values - b.values
    n = d.size
    return _make(np.asarray(np.mean(d * d)), (a, b),
                 lambda g: (2.0 * float(g) / n * d, -2.0 * float(g) / n * d))


# ----------------------------------------------------------------------------- convolution


def _as_2d(x, w):
    """Lift 1D (C, n) / (Co, Ci, k) operands to the 2D kernel layout."""
    if x.ndim == 2 and w.ndim == 3:
        return x[:, None, :], w[:, :, None, :], True
    if x.ndim == 3 and w.ndim == 4:
        return x, w, False
    raise ShapeError(f"conv: incompatible ranks input {x.shape} vs kernel {w.shape}")


def conv(x, w, b=None, stride=1, padding="periodic"):
    """Cross-correlate ``x`` (Ci, *spatial) with ``w`` (Co, Ci, *kernel).

    ``padding`` is ``"periodic"`` (wrap halo of kernel//2 per side) or
    ``"none"`` (valid correlation). ``b`` is an optional (Co,) bias.
    """
    if padding not in ("periodic", "none"):
        raise ValueError(f"conv: unknown padding mode {padding!r}")
    periodic = padding == "periodic"
    x4, w4, is1d = _as_2d(x.values, w.values)
    if x4.shape[0] != w4.shape[1]:
        raise ShapeError(f"conv: input channels {x.shape} do not match kernel {w.shape}")
    if b is not None and b.shape != (w4.shape[0],):
        raise ShapeError(f"conv: bias shape {b.shape} vs kernel {w.shape}")
    H, W = x4.shape[1], x4.shape[2]
    kh, kw = w4.shape[2], w4.shape[3]
    if periodic and (kh // 2 > H or kw // 2 > W):
        raise ShapeError(f"conv: halo of kernel {w.shape} exceeds grid {x.shape}")
    if not periodic and (kh > H or kw > W):
        raise ShapeError(f"conv: kernel {w.shape} larger than unpadded input {x.shape}")
    y = kernels.conv2d_forward(x4, w4, stride, periodic)
    if b is not None:
        y += b.values[:, None, None]
    if is1d:
        y = y[:, 0, :]
    out_shape = y.shape

    def backward(g):
        g4 = np.ascontiguousarray(g.reshape(out_shape[0], -1, out_shape[-1]))
        gx = gw = gb = None
        if x.requires_grad:
            gx = kernels.conv2d_backward_input(g4, w4, H, W, stride, periodic).reshape(x.shape)
        if w.requires_grad:
            gw = kernels.conv2d_backward_weight(g4, x4, kh, kw, stride, periodic).reshape(w.shape)
        if b is not None and b.requires_grad:
            gb = g4.sum(axis=(1, 2))
        return (gx, gw, gb) if b is not None else (gx, gw)

    inputs = (x, w, b) if b is not None else (x, w)
    return _make(np.ascontiguousarray(y), inputs, backward)


def conv_1x1(x, w, b=None):
    """Channel mixing: ``w`` is (Co, Ci), applied pointwise."""
    if w.values.ndim != 2 or w.shape[1] != x.shape[0]:
        raise ShapeError(f"conv_1x1: kernel {w.shape} vs input {x.shape}")
    if b is not None and b.shape != (w.shape[0],):
        raise ShapeError(f"conv_1x1: bias {b.shape} vs kernel {w.shape}")
    xv, wv = x.values, w.values
    flat = xv.reshape(xv.shape[0], -1)
    y = wv @ flat
    if b is not None:
        y += b.values[:, None]
    y = y.reshape((wv.shape[0],) + xv.shape[1:])

    def backward(g):
        gf = g.reshape(g.shape[0], -1)
        gx = (wv.T @ gf).reshape(xv.shape) if x.requires_grad else None
        gw = gf @ flat.T if w.requires_grad else None
        if b is None:
            return gx, gw
        return gx, gw, gf.sum(axis=1)

    inputs = (x, w, b) if b is not None else (x, w)
    return _make(y, inputs, backward)


def upsample2x(x):
    """Nearest-neighbour x2 upsampling along every spatial axis."""
    v = x.values
    y = v
    for ax in range(1, v.ndim):
        y = np.repeat(y, 2, axis=ax)

    def backward(g):
        for ax in range(1, g.ndim):
            s = list(g.shape)
            s[ax:ax + 1] = [s[ax] // 2, 2]
            g = g.reshape(s).sum(axis=ax + 1)
        return (g,)

    return _make(y, (x,), backward)


# ----------------------------------------------------------------------------- dispatch

_OPS = {
    "add": add,
    "sub": sub,
    "elementwise_mul": mul,
    "scalar_mul": scalar_mul,
    "conv": conv,
    "conv_1x1": conv_1x1,
    "tanh": tanh,
    "sigmoid": sigmoid,
    "sum": tsum,
    "mean": mean,
    "mse": mse,
    "upsample2x": upsample2x,
    "channel_slice": channel_slice,
    "concat": concat,
}


def forward_op(op_kind, inputs, **attrs):
    """Apply a named op; ``scalar_mul`` takes ``scalar=`` as an attribute."""
    try:
        fn = _OPS[op_kind]
    except KeyError:
        raise ValueError(f"unknown op_kind {op_kind!r}; known: {sorted(_OPS)}") from None
    if op_kind == "scalar_mul":
        return fn(inputs[0], attrs["scalar"])
    if op_kind == "concat":
        return fn(inputs, **attrs)
    return fn(*inputs, **attrs)


# ----------------------------------------------------------------------------- backward


def backward(root, reset=False):
    """Reverse-mode sweep from a scalar ``root``.

    Leaf gradients are added into ``leaf.grad`` (accumulating across calls
    unless ``reset``). Returns ``{leaf id: grad}`` for the reachable
    requires_grad leaves.
    """
    if root.values.size != 1 or root.values.ndim != 0:
        raise ShapeError(f"backward: root must be a scalar, got shape {root.shape}")
    nodes = {}
    stack = [root]
    while stack:
        n = stack.pop()
        if n.id in nodes or not n.requires_grad:
            continue
        nodes[n.id] = n
        stack.extend(n.parents)
    leaves = [n for n in nodes.values() if not n.parents]
    if reset:
        for leaf in leaves:
            leaf.zero_grad()
    grads = {root.id: np.ones(())}
    # ids increase in creation order, so descending id is a reverse topological order
    for nid in sorted(nodes, reverse=True):
        n = nodes[nid]
        g = grads.pop(nid, None)
        if g is None:
            continue
        if not n.parents:
            n._grad = g.copy() if n._grad is None else n._grad + g
            continue
        for p, pg in zip(n.parents, n._backward(g)):
            if pg is None or not p.requires_grad:
                continue
            if p.id in grads:
                grads[p.id] = grads[p.id] + pg
            else:
                grads[p.id] = pg
    return {leaf.id: leaf.grad for leaf in leaves}


# ----------------------------------------------------------------------------- optimization


@dataclass
class AdamState:
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params, **kw):
        return cls(m=[np.zeros_like(p) for p in params], v=[np.zeros_like(p) for p in params], **kw)


def adam_step(params, grads, state, lr):
    """One bias-corrected Adam update (eps added outside the square root).

    ``params`` and ``grads`` are lists of arrays. Returns ``(new_params,
    new_state)``; inputs are not mutated. Raises
    :class:`NonFiniteGradientError` and leaves everything untouched if any
    gradient entry is NaN/inf.
    """
    if lr <= 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ShapeError("adam_step: params, grads and state lengths differ")
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise ShapeError(f"adam_step: param {p.shape} vs grad {g.shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError("non-finite gradient entry; step rejected")
    t = state.t + 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        new_p.append(p - lr * (m / c1) / (np.sqrt(v / c2) + state.eps))
        new_m.append(m)
        new_v.append(v)
    return new_p, AdamState(new_m, new_v, t, b1, b2, state.eps)


def clip_grad_norm(grads, max_norm=1.0):
    """Scale a list of gradient arrays so their global L2 norm is <= max_norm."""
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
    if total > max_norm and total > 0:
        scale = max_norm / total
        return [g * scale for g in grads], total
    return list(grads), total


class Adam:
    """Adam over a list of leaf DiffTensors, with global-norm gradient clipping."""

    def __init__(self, params, betas=(0.9, 0.999), eps=1e-8, clip_norm=1.0):
        self.params = list(params)
        self.clip_norm = clip_norm
        self.state = AdamState.zeros_like([p.values for p in self.params],
                                          beta1=betas[0], beta2=betas[1], eps=eps)

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self, lr):
        """Clip and apply one update; ``lr == 0`` is a no-op (weights and moments kept)."""
        if lr == 0:
            return
        grads = [p.grad for p in self.params]
        for g in grads:
            if not np.all(np.isfinite(g)):
                raise NonFiniteGradientError("non-finite gradient entry; step rejected")
        if self.clip_norm is not None:
            grads, _ = clip_grad_norm(grads, self.clip_norm)
        new_p, self.state = adam_step([p.values for p in self.params], grads, self.state, lr)
        for p, v in zip(self.params, new_p):
            p.values = v


@dataclass(frozen=True)
class LrSchedule:
    lr0: float
    step_size: int = 200
    gamma: float = 0.98

    def __post_init__(self):
        if self.lr0 <= 0 or self.gamma <= 0 or self.step_size < 1:
            raise ValueError(f"invalid schedule {self}")


def lr_at(schedule, epoch):
    """Step decay: ``lr0 * gamma ** (epoch // step_size)``."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return schedule.lr0 * schedule.gamma ** (epoch // schedule.step_size)

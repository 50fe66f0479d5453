"""Dense tensors with tape-based reverse-mode differentiation.

A :class:`Tensor` wraps a numpy array. Primitive functions in this module
compute their forward value eagerly and, when a :class:`Tape` is active and
any input requires gradients, append a record holding the vector-Jacobian
product needed to replay the adjoint later.

    >>> w = Tensor(2.0, requires_grad=True)
    >>> with Tape() as tape:
    ...     y = mul(w, Tensor(3.0))
    >>> float(tape.backward(y)[w])
    3.0
"""
from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor", "Tape", "ShapeError", "NumericError", "TapeError",
    "PRIMITIVES", "inject_adjoint_fault",
    "add", "sub", "mul", "matmul", "conv1x1", "temporal_conv", "batch_norm",
    "relu", "softmax", "dropout", "global_avg_pool", "affine",
    "reshape", "transpose", "take", "sum_all", "mean", "neg", "scale",
    "sigmoid", "softplus",
]


class ShapeError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


class TapeError(RuntimeError):
    pass


class Tensor:
    """An n-dimensional array that may take part in differentiation."""

    __slots__ = ("data", "requires_grad", "name", "__weakref__")

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __add__(self, other):
        return add(self, _as_tensor(other, self.dtype))

    def __radd__(self, other):
        return add(_as_tensor(other, self.dtype), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self.dtype))

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other, self.dtype))

    def __rmul__(self, other):
        return mul(_as_tensor(other, self.dtype), self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return neg(self)


def _as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


# --------------------------------------------------------------------------
# tape


_local = threading.local()


def _tape_stack():
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


@dataclass
class _Record:
    op: str
    inputs: tuple
    output: Tensor
    vjp: Callable


class Tape:
    """Ordered record of primitive applications.

    Use as a context manager; primitives evaluated inside the block are
    recorded when at least one input requires gradients. ``rng`` is the
    generator dropout draws its masks from when none is passed explicitly.
    """

    def __init__(self, rng=None):
        self.records: list[_Record] = []
        self.rng = rng
        self._produced: set[int] = set()
        self.consumed = False

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()
        return False

    def _push(self, record):
        if self.consumed:
            raise TapeError("cannot record onto a consumed tape")
        self.records.append(record)
        self._produced.add(id(record.output))

    def backward(self, loss: Tensor, wrt: Sequence[Tensor] | None = None):
        """Replay adjoints from ``loss`` back to every leaf that requires grad.

        Returns a dict mapping each leaf tensor to its gradient array. Tensors
        listed in ``wrt`` that the loss does not depend on map to zeros.
        """
        if self.consumed:
            raise TapeError("tape already consumed by a previous backward()")
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        self.consumed = True

        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        if loss.requires_grad and id(loss) not in self._produced:
            leaves[id(loss)] = loss

        for rec in reversed(self.records):
            g = grads.pop(id(rec.output), None)
            if g is None:
                continue
            in_grads = rec.vjp(g)
            factor = _FAULTS.get(rec.op)
            for t, gi in zip(rec.inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                if factor is not None:
                    gi = gi * factor
                if gi.shape != t.shape:
                    gi = _unbroadcast(gi, t.shape)
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
                if key not in self._produced:
                    leaves[key] = t

        out = {}
        for key, t in leaves.items():
            out[t] = grads.get(key, np.zeros_like(t.data))
        for t in wrt or ():
            if t not in out:
                out[t] = np.zeros_like(t.data)
        self.records = []
        self._produced = set()
        return out


_FAULTS: dict[str, float] = {}


@contextlib.contextmanager
def inject_adjoint_fault(op: str, factor: float = 1.5):
    """Scale the recorded adjoint of ``op`` by ``factor`` (negative control)."""
    if op not in PRIMITIVES:
        raise KeyError(f"unknown primitive {op!r}")
    _FAULTS[op] = factor
    try:
        yield
    finally:
        _FAULTS.pop(op, None)


def _finish(op, out, inputs, vjp):
    if not np.all(np.isfinite(out)):
        raise NumericError(f"{op}: non-finite value in output")
    result = Tensor(out)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        result.requires_grad = True
        tape._push(_Record(op, tuple(inputs), result, vjp))
    return result


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


def _sum_outer(g3, x3):
    """sum_n g3[n] @ x3[n].T; per-sample GEMMs beat tensordot's transposes."""
    acc = g3[0] @ x3[0].T
    for i in range(1, g3.shape[0]):
        acc += g3[i] @ x3[i].T
    return acc


def _check_broadcast(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# --------------------------------------------------------------------------
# elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("add", a, b)
    return _finish("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("sub", a, b)
    return _finish("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("mul", a, b)
    ad, bd = a.data, b.data
    return _finish("mul", ad * bd, (a, b), lambda g: (g * bd, g * ad))


def neg(a: Tensor) -> Tensor:
    return _finish("neg", -a.data, (a,), lambda g: (-g,))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _finish("scale", a.data * c, (a,), lambda g: (g * c,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _finish("relu", x.data * mask, (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    s = _stable_sigmoid(x.data)
    return _finish("sigmoid", s, (x,), lambda g: (g * s * (1 - s),))


def softplus(x: Tensor) -> Tensor:
    """log(1 + exp(x)), computed without overflow."""
    d = x.data
    out = np.logaddexp(0, d)
    s = _stable_sigmoid(d)
    return _finish("softplus", out, (x,), lambda g: (g * s,))


def _stable_sigmoid(d):
    e = np.exp(-np.abs(d))
    return np.where(d >= 0, 1 / (1 + e), e / (1 + e))


# --------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product with numpy broadcasting over leading axes."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: batch shapes {a.shape} and {b.shape} do not broadcast") from None
    ad, bd = a.data, b.data

    def vjp(g):
        if b.ndim == 2 and a.ndim > 2:
            # shared right matrix: one GEMM over the flattened rows
            ga = g @ bd.T
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            return ga, gb
        return g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g

    return _finish("matmul", ad @ bd, (a, b), vjp)


def conv1x1(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Channel mixing of an N x C x T x V map by an O x C weight."""
    if x.ndim != 4 or w.ndim != 2 or w.shape[1] != x.shape[1]:
        raise ShapeError(f"conv1x1: input {x.shape} incompatible with weight {w.shape}")
    if b is not None and b.shape != (w.shape[0],):
        raise ShapeError(f"conv1x1: bias {b.shape} does not match weight {w.shape}")
    n, c, t, v = x.shape
    o = w.shape[0]
    xd = x.data.reshape(n, c, t * v)
    wd = w.data
    out = np.matmul(wd, xd)
    if b is not None:
        out += b.data[:, None]
    out = out.reshape(n, o, t, v)

    def vjp(g):
        g3 = g.reshape(n, o, t * v)
        gx = np.matmul(wd.T, g3).reshape(x.shape)
        gw = _sum_outer(g3, xd)
        if b is None:
            return gx, gw
        return gx, gw, g3.sum(axis=(0, 2))

    inputs = (x, w) if b is None else (x, w, b)
    return _finish("conv1x1", out, inputs, vjp)


def _im2col_time(x, k):
    """N x C x T x V -> N x (C*K) x (T*V) windows with zero same-padding."""
    n, c, t, v = x.shape
    pad = k // 2
    xp = np.zeros((n, c, (t + 2 * pad) * v), dtype=x.dtype)
    xp[:, :, pad * v:(pad + t) * v] = x.reshape(n, c, t * v)
    s0, s1, s2 = xp.strides
    win = np.lib.stride_tricks.as_strided(xp, shape=(n, c, k, t * v),
                                          strides=(s0, s1, v * s2, s2), writeable=False)
    return win.reshape(n, c * k, t * v)


def temporal_conv(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """K x 1 convolution along the time axis with zero same-padding.

    ``w`` has shape O x C x K with K odd.
    """
    if x.ndim != 4 or w.ndim != 3 or w.shape[1] != x.shape[1]:
        raise ShapeError(f"temporal_conv: input {x.shape} incompatible with kernel {w.shape}")
    k = w.shape[2]
    if k % 2 != 1:
        raise ShapeError(f"temporal_conv: kernel length must be odd, got {k}")
    if b is not None and b.shape != (w.shape[0],):
        raise ShapeError(f"temporal_conv: bias {b.shape} does not match kernel {w.shape}")
    n, c, t, v = x.shape
    o = w.shape[0]
    cols = _im2col_time(x.data, k)
    w2 = w.data.reshape(o, c * k)
    out = np.matmul(w2, cols)
    if b is not None:
        out += b.data[:, None]
    out = out.reshape(n, o, t, v)

    def vjp(g):
        g3 = g.reshape(n, o, t * v)
        gw = _sum_outer(g3, cols).reshape(w.shape)
        # input gradient is the correlation with the flipped, transposed kernel
        wt = np.ascontiguousarray(w.data[:, :, ::-1].transpose(1, 0, 2)).reshape(c, o * k)
        gx = np.matmul(wt, _im2col_time(g3.reshape(n, o, t, v), k)).reshape(x.shape)
        if b is None:
            return gx, gw
        return gx, gw, g3.sum(axis=(0, 2))

    inputs = (x, w) if b is None else (x, w, b)
    return _finish("temporal_conv", out, inputs, vjp)


def affine(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Fully connected map: x (N x D) -> x W^T + b, with W of shape O x D."""
    if x.ndim != 2 or w.ndim != 2 or w.shape[1] != x.shape[1]:
        raise ShapeError(f"affine: input {x.shape} incompatible with weight {w.shape}")
    if b is not None and b.shape != (w.shape[0],):
        raise ShapeError(f"affine: bias {b.shape} does not match weight {w.shape}")
    xd, wd = x.data, w.data
    out = xd @ wd.T
    if b is not None:
        out = out + b.data

    def vjp(g):
        gx, gw = g @ wd, g.T @ xd
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=0)

    inputs = (x, w) if b is None else (x, w, b)
    return _finish("affine", out, inputs, vjp)


# --------------------------------------------------------------------------
# normalization, activations, pooling


class BatchNormState:
    """Running mean/variance for one batch-normalization layer.

    The running estimate is a plain cumulative average until ``1/momentum``
    batches have been seen, then an exponential average, so short runs are
    not dominated by the initial values.
    """

    def __init__(self, shape, dtype=np.float64, momentum=0.1, eps=1e-5):
        self.mean = np.zeros(shape, dtype=dtype)
        self.var = np.ones(shape, dtype=dtype)
        self.momentum = momentum
        self.eps = eps
        self.batches = 0


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState,
               feature_axes=(1,), train=True) -> Tensor:
    """Normalize ``x`` per feature; statistics pool over all other axes.

    ``gamma``/``beta`` and the running statistics have the shape of ``x``
    restricted to ``feature_axes``. In train mode the running statistics are
    updated in place (unbiased variance, momentum from ``state``).
    """
    feature_axes = tuple(a % x.ndim for a in feature_axes)
    fshape = tuple(x.shape[a] for a in feature_axes)
    if gamma.shape != fshape or beta.shape != fshape or state.mean.shape != fshape:
        raise ShapeError(f"batch_norm: input {x.shape} over axes {feature_axes} needs "
                         f"parameters of shape {fshape}, got {gamma.shape}/{beta.shape}")
    red = tuple(a for a in range(x.ndim) if a not in feature_axes)
    bshape = tuple(x.shape[a] if a in feature_axes else 1 for a in range(x.ndim))
    gd = gamma.data.reshape(bshape)
    eps = state.eps

    if not train:
        inv = 1.0 / np.sqrt(state.var.reshape(bshape) + eps)
        xhat = (x.data - state.mean.reshape(bshape)) * inv
        out = gd * xhat + beta.data.reshape(bshape)

        def vjp_eval(g):
            return (g * gd * inv, (g * xhat).sum(axis=red).reshape(fshape),
                    g.sum(axis=red).reshape(fshape))

        return _finish("batch_norm", out, (x, gamma, beta), vjp_eval)

    count = x.data.size // int(np.prod(fshape))
    if count < 2:
        raise ShapeError(f"batch_norm: train mode needs at least 2 values per feature, input {x.shape}")
    mu = x.data.mean(axis=red, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=red, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = gd * xhat + beta.data.reshape(bshape)

    state.batches += 1
    m = max(state.momentum, 1.0 / state.batches)
    state.mean[...] = (1 - m) * state.mean + m * mu.reshape(fshape)
    state.var[...] = (1 - m) * state.var + m * var.reshape(fshape) * count / (count - 1)

    def vjp(g):
        gg = g * gd
        gx = inv * (gg - gg.mean(axis=red, keepdims=True)
                    - xhat * (gg * xhat).mean(axis=red, keepdims=True))
        return (gx, (g * xhat).sum(axis=red).reshape(fshape),
                g.sum(axis=red).reshape(fshape))

    return _finish("batch_norm", out, (x, gamma, beta), vjp)


def softmax(x: Tensor, axis=-1) -> Tensor:
    d = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(d)
    s = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _finish("softmax", s, (x,), vjp)


def dropout(x: Tensor, p: float, rng=None, train=True) -> Tensor:
    """Inverted dropout; identity when ``train`` is false or ``p`` is 0."""
    if not 0 <= p < 1:
        raise ValueError(f"dropout: probability must be in [0, 1), got {p}")
    if not train or p == 0:
        return x
    if rng is None:
        tape = active_tape()
        rng = tape.rng if tape is not None else None
    if rng is None:
        raise ValueError("dropout: train mode needs a seeded generator")
    keep = (rng.random(x.shape, dtype=x.dtype) >= p).astype(x.dtype) * x.dtype.type(1 / (1 - p))
    return _finish("dropout", x.data * keep, (x,), lambda g: (g * keep,))


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over the T x V axes of an N x C x T x V map -> N x C."""
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool: expected N x C x T x V, got {x.shape}")
    n, c, t, v = x.shape

    def vjp(g):
        return (np.broadcast_to(g[:, :, None, None] / (t * v), x.shape).copy(),)

    return _finish("global_avg_pool", x.data.mean(axis=(2, 3)), (x,), vjp)


# --------------------------------------------------------------------------
# structural and reductions


def reshape(x: Tensor, shape) -> Tensor:
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {x.shape} to {tuple(shape)}") from None
    return _finish("reshape", out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    if sorted(a % x.ndim for a in axes) != list(range(x.ndim)):
        raise ShapeError(f"transpose: axes {axes} invalid for shape {x.shape}")
    inverse = tuple(np.argsort([a % x.ndim for a in axes]))
    return _finish("transpose", np.transpose(x.data, axes), (x,),
                   lambda g: (np.transpose(g, inverse),))


def take(x: Tensor, index) -> Tensor:
    """Select rows of ``x`` along axis 0."""
    index = np.asarray(index, dtype=np.intp)

    def vjp(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, index, g)
        return (gx,)

    return _finish("take", x.data[index], (x,), vjp)


def sum_all(x: Tensor) -> Tensor:
    return _finish("sum", np.asarray(x.data.sum()), (x,),
                   lambda g: (np.broadcast_to(g, x.shape).copy(),))


def mean(x: Tensor) -> Tensor:
    if x.data.size == 0:
        raise ShapeError("mean: empty tensor")
    n = x.data.size
    return _finish("mean", np.asarray(x.data.mean()), (x,),
                   lambda g: (np.broadcast_to(g / n, x.shape).copy(),))


# primitive name -> callable, used by the gradient checker and fault hook
PRIMITIVES = {
    "add": add, "sub": sub, "mul": mul, "neg": neg, "scale": scale,
    "matmul": matmul, "conv1x1": conv1x1, "temporal_conv": temporal_conv,
    "affine": affine, "batch_norm": batch_norm, "relu": relu, "sigmoid": sigmoid,
    "softplus": softplus, "softmax": softmax, "dropout": dropout,
    "global_avg_pool": global_avg_pool, "reshape": reshape, "transpose": transpose,
    "take": take, "sum": sum_all, "mean": mean,
}

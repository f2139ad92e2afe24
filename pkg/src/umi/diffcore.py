"""Reverse-mode differentiable primitives over numpy arrays.

Operations executed inside an active :class:`ComputationRecord` that touch a
tracked :class:`DTensor` are appended to that record; ``record.backward(loss)``
then walks the record in reverse and accumulates ``.grad`` on tracked leaves.
Outside a record every primitive is a plain forward computation.

Example
-------
>>> w = DTensor(np.ones((2, 2)), track=True)
>>> with ComputationRecord() as rec:
...     loss = sum_(matmul(w, w))
>>> rec.backward(loss)
"""
from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import kernels

MASK_NEG = -1e30
LN_EPS = 1e-5


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class DegenerateMaskError(ValueError):
    """An attention mask row has no admissible key."""


class NumericalInstabilityError(FloatingPointError):
    """A primitive produced a non-finite value."""

    def __init__(self, primitive: str):
        super().__init__(f"non-finite value produced by primitive '{primitive}'")
        self.primitive = primitive


class RecordConsumedError(RuntimeError):
    """backward() was called twice on the same record."""


class DTensor:
    """An n-d array with an optional gradient buffer.

    ``track`` marks participation in gradient computation.  Leaves created by
    the user with ``track=True`` are parameters; tensors produced inside a
    record inherit tracking from their operands.
    """

    __slots__ = ("data", "grad", "track")
    __array_priority__ = 100

    def __init__(self, data, track: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        if not np.all(np.isfinite(arr)):
            raise NumericalInstabilityError("DTensor")
        self.data = arr
        self.grad = None
        self.track = track

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "DTensor":
        return DTensor(self.data)

    def __repr__(self) -> str:
        return f"DTensor(shape={self.shape}, dtype={self.dtype}, track={self.track})"

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


@dataclass
class _Node:
    name: str
    inputs: tuple
    out: DTensor
    backward: Callable


@dataclass
class ComputationRecord:
    """Ordered log of primitive applications, replayable backward once."""

    nodes: list = field(default_factory=list)
    consumed: bool = False

    def __enter__(self):
        _stack().append(self)
        return self

    def __exit__(self, *exc):
        _stack().pop()
        return False

    def _push(self, node: _Node) -> None:
        self.nodes.append(node)

    def backward(self, out: DTensor, seed: np.ndarray | None = None) -> None:
        if self.consumed:
            raise RecordConsumedError("computation record already replayed")
        self.consumed = True
        if seed is None:
            if out.data.size != 1:
                raise DimensionError(f"backward seed required for non-scalar output {out.shape}")
            seed = np.ones_like(out.data)
        produced = {id(n.out) for n in self.nodes}
        pending = {id(out): np.asarray(seed, dtype=out.dtype)}
        if id(out) not in produced and out.track:
            _accumulate(out, pending.pop(id(out)))
        for node in reversed(self.nodes):
            g = pending.pop(id(node.out), None)
            if g is None:
                continue
            grads = node.backward(g)
            for t, gi in zip(node.inputs, grads):
                if gi is None or not isinstance(t, DTensor) or not t.track:
                    continue
                if id(t) in produced:
                    prev = pending.get(id(t))
                    pending[id(t)] = gi if prev is None else prev + gi
                else:
                    _accumulate(t, gi)
        self.nodes = []


_local = threading.local()


def _stack() -> list:
    if not hasattr(_local, "stack"):
        _local.stack = []
    return _local.stack


def _active() -> ComputationRecord | None:
    s = _stack()
    return s[-1] if s else None


def _accumulate(t: DTensor, g: np.ndarray) -> None:
    g = np.asarray(g, dtype=t.dtype).reshape(t.shape)
    if t.grad is None:
        t.grad = g.copy()
    else:
        t.grad = t.grad + g


def as_tensor(x, like: DTensor | None = None) -> DTensor:
    if isinstance(x, DTensor):
        return x
    dtype = like.dtype if like is not None else None
    return DTensor(np.asarray(x, dtype=dtype))


def _emit(name: str, data: np.ndarray, inputs: Sequence[DTensor], backward: Callable) -> DTensor:
    if not np.all(np.isfinite(data)):
        raise NumericalInstabilityError(name)
    out = DTensor.__new__(DTensor)
    out.data, out.grad, out.track = data, None, False
    rec = _active()
    if rec is not None and any(t.track for t in inputs):
        out.track = True
        rec._push(_Node(name, tuple(inputs), out, backward))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# ----------------------------------------------------------------------------
# elementwise
# ----------------------------------------------------------------------------

def add(a, b) -> DTensor:
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return _emit("add", a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> DTensor:
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return _emit("sub", a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> DTensor:
    a, b = _pair(a, b)
    ad, bd = a.data, b.data
    return _emit("mul", ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def square(x: DTensor) -> DTensor:
    xd = x.data
    return _emit("square", xd * xd, (x,), lambda g: (2.0 * xd * g,))


def relu(x: DTensor) -> DTensor:
    xd = x.data
    pos = xd > 0
    return _emit("relu", np.where(pos, xd, 0).astype(xd.dtype), (x,), lambda g: (g * pos,))


def gelu(x: DTensor) -> DTensor:
    """GELU, tanh approximation."""
    xd = np.ascontiguousarray(x.data)
    return _emit("gelu", kernels.gelu_fwd(xd), (x,),
                 lambda g: (kernels.gelu_bwd(xd, np.ascontiguousarray(g)),))


def _pair(a, b) -> tuple[DTensor, DTensor]:
    like = a if isinstance(a, DTensor) else b if isinstance(b, DTensor) else None
    return as_tensor(a, like), as_tensor(b, like)


# ----------------------------------------------------------------------------
# shape
# ----------------------------------------------------------------------------

def reshape(x: DTensor, shape) -> DTensor:
    src = x.shape
    return _emit("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(src),))


def transpose(x: DTensor, axes=None) -> DTensor:
    """Permute axes; default swaps the last two."""
    if axes is None:
        axes = list(range(x.ndim))
        axes[-2], axes[-1] = axes[-1], axes[-2]
    inv = np.argsort(axes)
    return _emit("transpose", np.transpose(x.data, axes), (x,),
                 lambda g: (np.transpose(g, inv),))


def concat(xs: Sequence[DTensor], axis: int = 0) -> DTensor:
    xs = [as_tensor(t) for t in xs]
    sizes = [t.shape[axis] for t in xs]
    cuts = np.cumsum(sizes)[:-1]
    return _emit("concat", np.concatenate([t.data for t in xs], axis=axis), xs,
                 lambda g: tuple(np.split(g, cuts, axis=axis)))


def take(x: DTensor, idx, axis: int = 0) -> DTensor:
    """Gather along ``axis`` (repeated indices accumulate in backward)."""
    idx = np.asarray(idx, dtype=np.intp)
    shape = x.shape

    def bw(g):
        out = np.zeros(shape, dtype=g.dtype)
        np.add.at(out, (slice(None),) * (axis % len(shape)) + (idx,), g)
        return (out,)

    return _emit("take", np.take(x.data, idx, axis=axis), (x,), bw)


def scatter(x: DTensor, idx, n: int) -> DTensor:
    """Zeros of leading length ``n`` with ``out[idx] = x``; indices must be unique."""
    idx = np.asarray(idx, dtype=np.intp)
    if len(np.unique(idx)) != len(idx):
        raise ValueError("scatter indices must be unique")
    out = np.zeros((n,) + x.shape[1:], dtype=x.dtype)
    out[idx] = x.data
    return _emit("scatter", out, (x,), lambda g: (g[idx],))


# ----------------------------------------------------------------------------
# reductions
# ----------------------------------------------------------------------------

def sum_(x: DTensor, axis=None, keepdims: bool = False) -> DTensor:
    shape = x.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _emit("sum", np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), bw)


def mean(x: DTensor, axis=None, keepdims: bool = False) -> DTensor:
    n = x.data.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return mul(sum_(x, axis=axis, keepdims=keepdims), 1.0 / n)


def amin(x: DTensor, axis: int = -1) -> DTensor:
    """Minimum along ``axis``; the gradient flows to the first minimizer."""
    xd = x.data
    arg = np.argmin(xd, axis=axis)
    shape = x.shape

    def bw(g):
        out = np.zeros(shape, dtype=g.dtype)
        np.put_along_axis(out, np.expand_dims(arg, axis), np.expand_dims(g, axis), axis=axis)
        return (out,)

    return _emit("amin", np.take_along_axis(xd, np.expand_dims(arg, axis), axis=axis).squeeze(axis),
                 (x,), bw)


# ----------------------------------------------------------------------------
# linear algebra and normalization
# ----------------------------------------------------------------------------

def matmul(a, b) -> DTensor:
    """Batched matrix product with numpy broadcasting over leading axes."""
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        if bd.ndim == 2 and ad.ndim > 2:
            # one flat product instead of a batched one followed by a sum
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return _emit("matmul", ad @ bd, (a, b), bw)


def _to_last(xd: np.ndarray, axis: int) -> np.ndarray:
    return np.ascontiguousarray(np.moveaxis(xd, axis, -1))


def softmax(x: DTensor, axis: int = -1) -> DTensor:
    """Max-subtracted softmax along ``axis``."""
    axis = _check_axis(x, axis)
    xl = _to_last(x.data, axis)
    yl = kernels.softmax_fwd(xl.reshape(-1, xl.shape[-1])).reshape(xl.shape)

    def bw(g):
        gl = _to_last(g, axis)
        dl = kernels.softmax_bwd(yl.reshape(-1, yl.shape[-1]), gl.reshape(-1, gl.shape[-1]))
        return (np.moveaxis(dl.reshape(yl.shape), -1, axis),)

    return _emit("softmax", np.moveaxis(yl, -1, axis), (x,), bw)


def log_softmax(x: DTensor, axis: int = -1) -> DTensor:
    axis = _check_axis(x, axis)
    xl = _to_last(x.data, axis)
    yl = kernels.log_softmax_fwd(xl.reshape(-1, xl.shape[-1])).reshape(xl.shape)

    def bw(g):
        gl = _to_last(g, axis)
        dl = kernels.log_softmax_bwd(yl.reshape(-1, yl.shape[-1]), gl.reshape(-1, gl.shape[-1]))
        return (np.moveaxis(dl.reshape(yl.shape), -1, axis),)

    return _emit("log_softmax", np.moveaxis(yl, -1, axis), (x,), bw)


softmax_axis = softmax


def _check_axis(x: DTensor, axis: int) -> int:
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"axis {axis} invalid for shape {x.shape}")
    return axis % x.ndim


def layer_norm(x: DTensor, gain: DTensor, bias: DTensor) -> DTensor:
    """Normalize the last axis to zero mean, unit variance, then affine."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm affine shapes {gain.shape}, {bias.shape} vs width {d}")
    x2 = np.ascontiguousarray(x.data).reshape(-1, d)
    y, xhat, rstd = kernels.layer_norm_fwd(x2, gain.data, bias.data, LN_EPS)
    shape = x.shape

    def bw(g):
        dx, dg, db = kernels.layer_norm_bwd(np.ascontiguousarray(g).reshape(-1, d), xhat, rstd, gain.data)
        return dx.reshape(shape), dg, db

    return _emit("layer_norm", y.reshape(shape), (x, gain, bias), bw)


def attention(q: DTensor, key: DTensor, v: DTensor, mask=None) -> DTensor:
    """Masked scaled dot-product attention.

    ``mask`` is a 0/1 array broadcastable to ``(..., k_q, k_k)``; masked
    positions receive exactly zero weight.  ``None`` means all-ones.
    """
    if q.shape[-1] != key.shape[-1] or key.shape[-2] != v.shape[-2]:
        raise DimensionError(f"attention shapes q{q.shape} k{key.shape} v{v.shape}")
    dim = q.shape[-1]
    scale = 1.0 / math.sqrt(dim)
    qd, kd, vd = q.data, key.data, v.data
    s = (qd @ np.swapaxes(kd, -1, -2)) * scale
    keep = None
    if mask is not None:
        m = np.asarray(mask)
        if not np.isin(m, (0, 1)).all():
            raise ValueError("attention mask entries must be 0 or 1")
        if not m.any(axis=-1).all():
            raise DegenerateMaskError("attention mask has an all-zero row")
        keep = np.broadcast_to(m.astype(bool), s.shape)
        s = np.where(keep, s, s + MASK_NEG)
    sl = np.ascontiguousarray(s).reshape(-1, s.shape[-1])
    a = kernels.softmax_fwd(sl).reshape(s.shape)
    if keep is not None:
        assert not a[~keep].any(), "masked attention weight is not exactly zero"
    out = a @ vd

    def bw(g):
        da = g @ np.swapaxes(vd, -1, -2)
        dv = _unbroadcast(np.swapaxes(a, -1, -2) @ g, vd.shape)
        ds = kernels.softmax_bwd(a.reshape(-1, a.shape[-1]),
                                 np.ascontiguousarray(da).reshape(-1, a.shape[-1])).reshape(a.shape)
        ds = ds * scale
        dq = _unbroadcast(ds @ kd, qd.shape)
        dk = _unbroadcast(np.swapaxes(ds, -1, -2) @ qd, kd.shape)
        return dq, dk, dv

    return _emit("attention", out, (q, key, v), bw)


# ----------------------------------------------------------------------------
# gradient verification
# ----------------------------------------------------------------------------

def grad_check(f: Callable[[], DTensor], params: Sequence[DTensor], h: float = 1e-5,
               max_entries: int | None = None, rng: np.random.Generator | None = None) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` builds a scalar from ``params`` (which must be float64 and tracked).
    With ``max_entries`` set, each parameter is probed at a random subset of
    at most that many coordinates.
    """
    for p in params:
        if p.dtype != np.float64:
            raise TypeError("grad_check requires float64 parameters")
        p.grad = None
    with ComputationRecord() as rec:
        out = f()
    rec.backward(out)
    worst = 0.0
    for p in params:
        analytic = np.zeros(p.shape) if p.grad is None else p.grad
        flat = p.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            rng = rng or np.random.default_rng(0)
            coords = rng.choice(flat.size, size=max_entries, replace=False)
        if not p.data.flags.c_contiguous:
            p.data = np.ascontiguousarray(p.data)
            flat = p.data.reshape(-1)
        ga = analytic.reshape(-1)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f().data)
            flat[i] = orig - h
            fm = float(f().data)
            flat[i] = orig
            num = (fp - fm) / (2.0 * h)
            err = abs(ga[i] - num) / max(abs(ga[i]), abs(num), 1e-8)
            worst = max(worst, err)
        p.grad = None
    return worst

"""Hot row-wise kernels used by the differentiable primitives.

Every kernel exists twice: a numba loop version (``numba_impl``) and a
vectorized numpy version (``numpy_impl``).  Module-level names resolve to
one of them depending on :data:`umi._accel.USE_NUMBA`.  All kernels take
2-D C-contiguous arrays whose last axis is the reduction axis, and return
arrays of the same dtype.
"""
import math
from types import SimpleNamespace

import numpy as np

from ._accel import USE_NUMBA, optional_njit

GELU_C = 0.7978845608028654  # sqrt(2 / pi)
GELU_A = 0.044715


# ----------------------------------------------------------------------------
# numba versions
# ----------------------------------------------------------------------------

@optional_njit(cache=True)
def _softmax_fwd_nb(x):
    n, m = x.shape
    out = np.empty_like(x)
    for i in range(n):
        mx = x[i, 0]
        for j in range(1, m):
            if x[i, j] > mx:
                mx = x[i, j]
        s = 0.0
        for j in range(m):
            e = np.exp(x[i, j] - mx)
            out[i, j] = e
            s += e
        inv = 1.0 / s
        for j in range(m):
            out[i, j] = out[i, j] * inv
    return out


@optional_njit(cache=True)
def _softmax_bwd_nb(y, g):
    n, m = y.shape
    out = np.empty_like(y)
    for i in range(n):
        dot = 0.0
        for j in range(m):
            dot += y[i, j] * g[i, j]
        for j in range(m):
            out[i, j] = y[i, j] * (g[i, j] - dot)
    return out


@optional_njit(cache=True)
def _log_softmax_fwd_nb(x):
    n, m = x.shape
    out = np.empty_like(x)
    for i in range(n):
        mx = x[i, 0]
        for j in range(1, m):
            if x[i, j] > mx:
                mx = x[i, j]
        s = 0.0
        for j in range(m):
            s += np.exp(x[i, j] - mx)
        lse = mx + np.log(s)
        for j in range(m):
            out[i, j] = x[i, j] - lse
    return out


@optional_njit(cache=True)
def _log_softmax_bwd_nb(y, g):
    n, m = y.shape
    out = np.empty_like(y)
    for i in range(n):
        s = 0.0
        for j in range(m):
            s += g[i, j]
        for j in range(m):
            out[i, j] = g[i, j] - np.exp(y[i, j]) * s
    return out


@optional_njit(cache=True)
def _layer_norm_fwd_nb(x, gain, bias, eps):
    n, d = x.shape
    y = np.empty_like(x)
    xhat = np.empty_like(x)
    rstd = np.empty(n, dtype=x.dtype)
    for i in range(n):
        mu = 0.0
        for j in range(d):
            mu += x[i, j]
        mu /= d
        var = 0.0
        for j in range(d):
            c = x[i, j] - mu
            var += c * c
        var /= d
        r = 1.0 / np.sqrt(var + eps)
        rstd[i] = r
        for j in range(d):
            h = (x[i, j] - mu) * r
            xhat[i, j] = h
            y[i, j] = h * gain[j] + bias[j]
    return y, xhat, rstd


@optional_njit(cache=True)
def _layer_norm_bwd_nb(g, xhat, rstd, gain):
    n, d = g.shape
    dx = np.empty_like(g)
    dgain = np.zeros(d, dtype=g.dtype)
    dbias = np.zeros(d, dtype=g.dtype)
    for i in range(n):
        m1 = 0.0
        m2 = 0.0
        for j in range(d):
            dh = g[i, j] * gain[j]
            m1 += dh
            m2 += dh * xhat[i, j]
            dgain[j] += g[i, j] * xhat[i, j]
            dbias[j] += g[i, j]
        m1 /= d
        m2 /= d
        for j in range(d):
            dh = g[i, j] * gain[j]
            dx[i, j] = rstd[i] * (dh - m1 - xhat[i, j] * m2)
    return dx, dgain, dbias


@optional_njit(cache=True, inline="always")
def _tanh(u):
    # noticeably faster than the libm tanh inside numba loops
    return 1.0 - 2.0 / (math.exp(2.0 * u) + 1.0)


@optional_njit(cache=True)
def _gelu_fwd_nb(x):
    out = np.empty_like(x)
    flat = x.reshape(-1)
    of = out.reshape(-1)
    for i in range(flat.size):
        v = flat[i]
        t = _tanh(GELU_C * (v + GELU_A * v * v * v))
        of[i] = 0.5 * v * (1.0 + t)
    return out


@optional_njit(cache=True)
def _gelu_bwd_nb(x, g):
    out = np.empty_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    of = out.reshape(-1)
    for i in range(flat.size):
        v = flat[i]
        t = _tanh(GELU_C * (v + GELU_A * v * v * v))
        dt = GELU_C * (1.0 + 3.0 * GELU_A * v * v) * (1.0 - t * t)
        of[i] = gf[i] * (0.5 * (1.0 + t) + 0.5 * v * dt)
    return out


# ----------------------------------------------------------------------------
# numpy versions
# ----------------------------------------------------------------------------

def _softmax_fwd_np(x):
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _softmax_bwd_np(y, g):
    return y * (g - (y * g).sum(axis=-1, keepdims=True))


def _log_softmax_fwd_np(x):
    mx = x.max(axis=-1, keepdims=True)
    return x - (mx + np.log(np.exp(x - mx).sum(axis=-1, keepdims=True)))


def _log_softmax_bwd_np(y, g):
    return g - np.exp(y) * g.sum(axis=-1, keepdims=True)


def _layer_norm_fwd_np(x, gain, bias, eps):
    mu = x.mean(axis=-1, keepdims=True)
    c = x - mu
    var = (c * c).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = c * rstd
    return (xhat * gain + bias).astype(x.dtype), xhat.astype(x.dtype), rstd[:, 0].astype(x.dtype)


def _layer_norm_bwd_np(g, xhat, rstd, gain):
    dh = g * gain
    m1 = dh.mean(axis=-1, keepdims=True)
    m2 = (dh * xhat).mean(axis=-1, keepdims=True)
    dx = rstd[:, None] * (dh - m1 - xhat * m2)
    return dx.astype(g.dtype), (g * xhat).sum(axis=0), g.sum(axis=0)


def _gelu_fwd_np(x):
    t = np.tanh(GELU_C * (x + GELU_A * x ** 3))
    return (0.5 * x * (1.0 + t)).astype(x.dtype)


def _gelu_bwd_np(x, g):
    t = np.tanh(GELU_C * (x + GELU_A * x ** 3))
    dt = GELU_C * (1.0 + 3.0 * GELU_A * x * x) * (1.0 - t * t)
    return (g * (0.5 * (1.0 + t) + 0.5 * x * dt)).astype(x.dtype)


numba_impl = SimpleNamespace(
    softmax_fwd=_softmax_fwd_nb,
    softmax_bwd=_softmax_bwd_nb,
    log_softmax_fwd=_log_softmax_fwd_nb,
    log_softmax_bwd=_log_softmax_bwd_nb,
    layer_norm_fwd=_layer_norm_fwd_nb,
    layer_norm_bwd=_layer_norm_bwd_nb,
    gelu_fwd=_gelu_fwd_nb,
    gelu_bwd=_gelu_bwd_nb,
)

numpy_impl = SimpleNamespace(
    softmax_fwd=_softmax_fwd_np,
    softmax_bwd=_softmax_bwd_np,
    log_softmax_fwd=_log_softmax_fwd_np,
    log_softmax_bwd=_log_softmax_bwd_np,
    layer_norm_fwd=_layer_norm_fwd_np,
    layer_norm_bwd=_layer_norm_bwd_np,
    gelu_fwd=_gelu_fwd_np,
    gelu_bwd=_gelu_bwd_np,
)

BACKEND = "numba" if USE_NUMBA else "numpy"
active = numba_impl if USE_NUMBA else numpy_impl

softmax_fwd = active.softmax_fwd
softmax_bwd = active.softmax_bwd
log_softmax_fwd = active.log_softmax_fwd
log_softmax_bwd = active.log_softmax_bwd
layer_norm_fwd = active.layer_norm_fwd
layer_norm_bwd = active.layer_norm_bwd
gelu_fwd = active.gelu_fwd
gelu_bwd = active.gelu_bwd

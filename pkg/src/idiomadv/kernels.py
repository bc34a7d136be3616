"""Row-wise numeric kernels used by the autodiff primitives.

Every kernel exists twice: an explicit-loop version compiled with numba and a
vectorised numpy version. The public names (``softmax_fwd`` and friends) are
bound to one of them depending on :func:`idiomadv._jit.backend`. Both operate
on C-contiguous 2-D float64 arrays, one row per normalisation group, and both
reduce in a fixed order so repeated calls are bitwise reproducible.
"""

import math

import numpy as np

from ._jit import HAVE_NUMBA, njit

GELU_C = math.sqrt(2.0 / math.pi)
GELU_A = 0.044715


# ---------------------------------------------------------------------------
# numba loops
# ---------------------------------------------------------------------------


@njit(cache=True)
def _softmax_fwd_loop(x):
    n, c = x.shape
    out = np.empty_like(x)
    for i in range(n):
        m = x[i, 0]
        for j in range(1, c):
            if x[i, j] > m:
                m = x[i, j]
        s = 0.0
        for j in range(c):
            e = math.exp(x[i, j] - m)
            out[i, j] = e
            s += e
        inv = 1.0 / s
        for j in range(c):
            out[i, j] *= inv
    return out


@njit(cache=True)
def _softmax_bwd_loop(y, gy):
    n, c = y.shape
    gx = np.empty_like(y)
    for i in range(n):
        dot = 0.0
        for j in range(c):
            dot += gy[i, j] * y[i, j]
        for j in range(c):
            gx[i, j] = y[i, j] * (gy[i, j] - dot)
    return gx


@njit(cache=True)
def _layer_norm_fwd_loop(x, gain, bias, eps):
    n, d = x.shape
    out = np.empty_like(x)
    xhat = np.empty_like(x)
    rstd = np.empty(n)
    for i in range(n):
        mu = 0.0
        for j in range(d):
            mu += x[i, j]
        mu /= d
        var = 0.0
        for j in range(d):
            t = x[i, j] - mu
            var += t * t
        var /= d
        r = 1.0 / math.sqrt(var + eps)
        rstd[i] = r
        for j in range(d):
            h = (x[i, j] - mu) * r
            xhat[i, j] = h
            out[i, j] = h * gain[j] + bias[j]
    return out, xhat, rstd


@njit(cache=True)
def _layer_norm_bwd_loop(gy, xhat, rstd, gain):
    n, d = gy.shape
    gx = np.empty_like(gy)
    ggain = np.zeros(d)
    gbias = np.zeros(d)
    for i in range(n):
        m1 = 0.0
        m2 = 0.0
        for j in range(d):
            gh = gy[i, j] * gain[j]
            m1 += gh
            m2 += gh * xhat[i, j]
            ggain[j] += gy[i, j] * xhat[i, j]
            gbias[j] += gy[i, j]
        m1 /= d
        m2 /= d
        for j in range(d):
            gh = gy[i, j] * gain[j]
            gx[i, j] = rstd[i] * (gh - m1 - xhat[i, j] * m2)
    return gx, ggain, gbias


@njit(cache=True)
def _gelu_fwd_loop(x):
    n, d = x.shape
    out = np.empty_like(x)
    for i in range(n):
        for j in range(d):
            v = x[i, j]
            t = math.tanh(GELU_C * (v + GELU_A * v * v * v))
            out[i, j] = 0.5 * v * (1.0 + t)
    return out


@njit(cache=True)
def _gelu_bwd_loop(x, gy):
    n, d = x.shape
    gx = np.empty_like(x)
    for i in range(n):
        for j in range(d):
            v = x[i, j]
            t = math.tanh(GELU_C * (v + GELU_A * v * v * v))
            dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * v * v)
            gx[i, j] = gy[i, j] * (0.5 * (1.0 + t) + 0.5 * v * dt)
    return gx


# ---------------------------------------------------------------------------
# numpy reference path
# ---------------------------------------------------------------------------


def _softmax_fwd_np(x):
    e = np.exp(x - x.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def _softmax_bwd_np(y, gy):
    return y * (gy - (gy * y).sum(axis=1, keepdims=True))


def _layer_norm_fwd_np(x, gain, bias, eps):
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=1)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd[:, None]
    return xhat * gain + bias, xhat, rstd


def _layer_norm_bwd_np(gy, xhat, rstd, gain):
    gh = gy * gain
    m1 = gh.mean(axis=1, keepdims=True)
    m2 = (gh * xhat).mean(axis=1, keepdims=True)
    gx = rstd[:, None] * (gh - m1 - xhat * m2)
    return gx, (gy * xhat).sum(axis=0), gy.sum(axis=0)


def _gelu_fwd_np(x):
    t = np.tanh(GELU_C * (x + GELU_A * x**3))
    return 0.5 * x * (1.0 + t)


def _gelu_bwd_np(x, gy):
    t = np.tanh(GELU_C * (x + GELU_A * x**3))
    dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
    return gy * (0.5 * (1.0 + t) + 0.5 * x * dt)


NUMPY_KERNELS = {
    "softmax_fwd": _softmax_fwd_np,
    "softmax_bwd": _softmax_bwd_np,
    "layer_norm_fwd": _layer_norm_fwd_np,
    "layer_norm_bwd": _layer_norm_bwd_np,
    "gelu_fwd": _gelu_fwd_np,
    "gelu_bwd": _gelu_bwd_np,
}

LOOP_KERNELS = {
    "softmax_fwd": _softmax_fwd_loop,
    "softmax_bwd": _softmax_bwd_loop,
    "layer_norm_fwd": _layer_norm_fwd_loop,
    "layer_norm_bwd": _layer_norm_bwd_loop,
    "gelu_fwd": _gelu_fwd_loop,
    "gelu_bwd": _gelu_bwd_loop,
}

_active = LOOP_KERNELS if HAVE_NUMBA else NUMPY_KERNELS

softmax_fwd = _active["softmax_fwd"]
softmax_bwd = _active["softmax_bwd"]
layer_norm_fwd = _active["layer_norm_fwd"]
layer_norm_bwd = _active["layer_norm_bwd"]
gelu_fwd = _active["gelu_fwd"]
gelu_bwd = _active["gelu_bwd"]

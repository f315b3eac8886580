"""Fused single-pass kernels for the elementwise-heavy ops (GELU, layer
norm, softmax).  numpy expressions for these cost 8-12 memory passes each;
the numba versions do 1-2.  Everything falls back to numpy when numba is
unavailable, with identical semantics (floating-point summation order may
differ between the two implementations, not between runs)."""

from __future__ import annotations

import numpy as np

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        def wrap(f):
            return f
        return wrap


_GELU_S = 0.7978845608028654  # sqrt(2/pi)
_GELU_C = 0.044715


@njit(cache=True)
def _gelu_bwd(g, x, t):
    out = np.empty_like(x)
    gf, xf, tf, of = g.ravel(), x.ravel(), t.ravel(), out.ravel()
    for i in range(xf.size):
        v = xf[i]
        tt = tf[i]
        d_inner = _GELU_S * (1.0 + 3.0 * _GELU_C * v * v)
        of[i] = gf[i] * (0.5 * (1.0 + tt) + 0.5 * v * (1.0 - tt * tt) * d_inner)
    return out


@njit(cache=True)
def _layer_norm_fwd(x2, gamma, beta, eps):
    rows, cols = x2.shape
    y = np.empty_like(x2)
    xhat = np.empty_like(x2)
    inv_std = np.empty_like(x2[:, 0])
    for r in range(rows):
        mu = 0.0
        for c in range(cols):
            mu += x2[r, c]
        mu /= cols
        var = 0.0
        for c in range(cols):
            d = x2[r, c] - mu
            var += d * d
        var /= cols
        inv = 1.0 / np.sqrt(var + eps)
        inv_std[r] = inv
        for c in range(cols):
            h = (x2[r, c] - mu) * inv
            xhat[r, c] = h
            y[r, c] = h * gamma[c] + beta[c]
    return y, xhat, inv_std


@njit(cache=True)
def _layer_norm_bwd(g2, xhat, inv_std, gamma):
    rows, cols = g2.shape
    dx = np.empty_like(g2)
    dgamma = np.zeros(cols, dtype=np.float64)
    dbeta = np.zeros(cols, dtype=np.float64)
    for r in range(rows):
        m1 = 0.0
        m2 = 0.0
        for c in range(cols):
            gy = g2[r, c] * gamma[c]
            m1 += gy
            m2 += gy * xhat[r, c]
            dgamma[c] += g2[r, c] * xhat[r, c]
            dbeta[c] += g2[r, c]
        m1 /= cols
        m2 /= cols
        inv = inv_std[r]
        for c in range(cols):
            gy = g2[r, c] * gamma[c]
            dx[r, c] = inv * (gy - m1 - xhat[r, c] * m2)
    return dx, dgamma, dbeta


@njit(cache=True)
def _softmax_bwd(g2, y2):
    rows, cols = g2.shape
    dx = np.empty_like(g2)
    for r in range(rows):
        dot = 0.0
        for c in range(cols):
            dot += g2[r, c] * y2[r, c]
        for c in range(cols):
            dx[r, c] = y2[r, c] * (g2[r, c] - dot)
    return dx


def gelu_fwd(x: np.ndarray):
    # numpy's vectorized tanh beats a scalar-libm numba loop here
    t = np.tanh(_GELU_S * x * (1.0 + _GELU_C * (x * x)))
    return 0.5 * x * (1.0 + t), t


def gelu_bwd(g: np.ndarray, x: np.ndarray, t: np.ndarray) -> np.ndarray:
    if HAVE_NUMBA:
        return _gelu_bwd(np.ascontiguousarray(g), np.ascontiguousarray(x), t)
    d_inner = _GELU_S * (1.0 + (3.0 * _GELU_C) * (x * x))
    return g * (0.5 * (1.0 + t) + (0.5 * x) * ((1.0 - t * t) * d_inner))


def layer_norm_fwd(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, eps: float):
    shape = x.shape
    x2 = np.ascontiguousarray(x).reshape(-1, shape[-1])
    if HAVE_NUMBA:
        y, xhat, inv_std = _layer_norm_fwd(x2, gamma, beta, eps)
    else:
        mu = x2.mean(axis=1, keepdims=True)
        xc = x2 - mu
        var = np.mean(xc * xc, axis=1, keepdims=True)
        inv_std = (1.0 / np.sqrt(var + eps)).reshape(-1).astype(x2.dtype)
        xhat = xc * inv_std[:, None]
        y = xhat * gamma + beta
    return y.reshape(shape), xhat, inv_std


def layer_norm_bwd(g: np.ndarray, xhat: np.ndarray, inv_std: np.ndarray,
                   gamma: np.ndarray):
    shape = g.shape
    g2 = np.ascontiguousarray(g).reshape(-1, shape[-1])
    if HAVE_NUMBA:
        dx, dgamma, dbeta = _layer_norm_bwd(g2, xhat, inv_std, gamma)
    else:
        gy = g2 * gamma
        m1 = gy.mean(axis=1, keepdims=True)
        m2 = np.mean(gy * xhat, axis=1, keepdims=True)
        dx = inv_std[:, None] * (gy - m1 - xhat * m2)
        dgamma = np.sum(g2 * xhat, axis=0, dtype=np.float64)
        dbeta = np.sum(g2, axis=0, dtype=np.float64)
    return dx.reshape(shape), dgamma.astype(g.dtype), dbeta.astype(g.dtype)


def softmax_fwd(x: np.ndarray) -> np.ndarray:
    # exp dominates; numpy's vectorized exp wins over a scalar numba loop
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def softmax_bwd(g: np.ndarray, y: np.ndarray) -> np.ndarray:
    shape = g.shape
    g2 = np.ascontiguousarray(g).reshape(-1, shape[-1])
    y2 = np.ascontiguousarray(y).reshape(-1, shape[-1])
    if HAVE_NUMBA:
        return _softmax_bwd(g2, y2).reshape(shape)
    dot = np.sum(g2 * y2, axis=1, keepdims=True)
    return (y2 * (g2 - dot)).reshape(shape)

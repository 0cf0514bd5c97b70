"""Fused elementwise kernels for the encoder hot path.

All inputs are 2-D C-contiguous views (rows x features).  Row reductions
accumulate in float64 whatever the storage dtype.
"""

import math

import numba as nb
import numpy as np

_C = math.sqrt(2.0 / math.pi)
_A = 0.044715

# no nnan/ninf: masked keys carry -inf; no nsz: ablated outputs must be +0.0
_jit = nb.njit(cache=True, nogil=True, fastmath={"reassoc", "contract", "arcp"})


@_jit
def gelu_backward(dg, u, t):
    du = np.empty_like(u)
    n, m = u.shape
    for i in range(n):
        for j in range(m):
            x = u[i, j]
            th = t[i, j]
            d = 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * _C * (1.0 + 3.0 * _A * x * x)
            du[i, j] = dg[i, j] * d
    return du


@_jit
def shift_rows(s, valid):
    """Subtract the row max over valid keys in place; masked keys become -inf.

    ``s`` is (B * H * T, T); every run of ``H * T`` consecutive rows belongs to
    batch row ``b`` and uses key mask ``valid[b]``.
    """
    n, m = s.shape
    rows_per_block = n // valid.shape[0]
    for i in range(n):
        vm = valid[i // rows_per_block]
        mx = -np.inf
        for j in range(m):
            if vm[j] and s[i, j] > mx:
                mx = s[i, j]
        for j in range(m):
            s[i, j] = s[i, j] - mx if vm[j] else -np.inf
    return s


@_jit
def normalize_rows(e):
    n, m = e.shape
    for i in range(n):
        acc = 0.0
        for j in range(m):
            acc += e[i, j]
        inv = 1.0 / acc
        for j in range(m):
            e[i, j] = e[i, j] * inv
    return e


@_jit
def softmax_backward(A, dA, scale):
    ds = np.empty_like(A)
    n, m = A.shape
    for i in range(n):
        acc = 0.0
        for j in range(m):
            acc += dA[i, j] * A[i, j]
        for j in range(m):
            ds[i, j] = A[i, j] * (dA[i, j] - acc) * scale
    return ds


@_jit
def layernorm_forward(x, g, b, eps):
    n, m = x.shape
    y = np.empty_like(x)
    xhat = np.empty_like(x)
    inv = np.empty(n, dtype=np.float64)
    for i in range(n):
        mu = 0.0
        for j in range(m):
            mu += x[i, j]
        mu /= m
        var = 0.0
        for j in range(m):
            c = x[i, j] - mu
            var += c * c
        var /= m
        r = 1.0 / math.sqrt(var + eps)
        inv[i] = r
        for j in range(m):
            xh = (x[i, j] - mu) * r
            xhat[i, j] = xh
            y[i, j] = g[j] * xhat[i, j] + b[j]
    return y, xhat, inv


@_jit
def layernorm_backward(dy, xhat, inv, g):
    n, m = dy.shape
    dx = np.empty_like(dy)
    dgamma = np.zeros(m, dtype=np.float64)
    dbeta = np.zeros(m, dtype=np.float64)
    for i in range(n):
        m1 = 0.0
        m2 = 0.0
        for j in range(m):
            d = dy[i, j]
            dgamma[j] += d * xhat[i, j]
            dbeta[j] += d
            dxh = d * g[j]
            m1 += dxh
            m2 += dxh * xhat[i, j]
        m1 /= m
        m2 /= m
        r = inv[i]
        for j in range(m):
            dx[i, j] = r * (dy[i, j] * g[j] - m1 - xhat[i, j] * m2)
    return dx, dgamma, dbeta


@_jit
def scatter_add_rows(out, idx, src):
    for i in range(idx.shape[0]):
        r = idx[i]
        for j in range(src.shape[1]):
            out[r, j] += src[i, j]

"""Numba @njit implementations of the hot kernels.

Same contracts as numpy_impl; the attention forward fuses score
computation, masking and the row softmax into one pass so the raw score
matrix is never materialized. All loops are serial for reproducibility.
"""

import numpy as np
from numba import njit

MASK_FILL = -1e9


@njit(cache=True)
def masked_softmax_fwd(scores, mask):
    n, rows, cols = scores.shape
    probs = np.empty_like(scores)
    for b in range(n):
        for i in range(rows):
            hi = -np.inf
            for j in range(cols):
                s = scores[b, i, j]
                if not mask[i, j]:
                    s += MASK_FILL
                probs[b, i, j] = s
                if s > hi:
                    hi = s
            total = 0.0
            for j in range(cols):
                e = np.exp(probs[b, i, j] - hi)
                probs[b, i, j] = e
                total += e
            inv = 1.0 / total
            for j in range(cols):
                probs[b, i, j] *= inv
    return probs


@njit(cache=True)
def masked_softmax_bwd(dprobs, probs):
    n, rows, cols = probs.shape
    dscores = np.empty_like(probs)
    for b in range(n):
        for i in range(rows):
            inner = 0.0
            for j in range(cols):
                inner += dprobs[b, i, j] * probs[b, i, j]
            for j in range(cols):
                dscores[b, i, j] = probs[b, i, j] * (dprobs[b, i, j] - inner)
    return dscores


@njit(cache=True)
def attention_fwd(q, k, v, mask, scale):
    n, t, d = q.shape
    out = np.empty_like(q)
    probs = np.empty((n, t, t))
    row = np.empty(t)
    for b in range(n):
        for i in range(t):
            hi = -np.inf
            for j in range(t):
                acc = 0.0
                for c in range(d):
                    acc += q[b, i, c] * k[b, j, c]
                acc *= scale
                if not mask[i, j]:
                    acc += MASK_FILL
                row[j] = acc
                if acc > hi:
                    hi = acc
            total = 0.0
            for j in range(t):
                e = np.exp(row[j] - hi)
                row[j] = e
                total += e
            inv = 1.0 / total
            for c in range(d):
                out[b, i, c] = 0.0
            for j in range(t):
                p = row[j] * inv
                probs[b, i, j] = p
                for c in range(d):
                    out[b, i, c] += p * v[b, j, c]
    return out, probs


@njit(cache=True)
def attention_bwd(dout, probs, q, k, v, scale):
    n, t, d = q.shape
    dq = np.zeros_like(q)
    dk = np.zeros_like(k)
    dv = np.zeros_like(v)
    dprow = np.empty(t)
    for b in range(n):
        for i in range(t):
            inner = 0.0
            for j in range(t):
                acc = 0.0
                for c in range(d):
                    acc += dout[b, i, c] * v[b, j, c]
                dprow[j] = acc
                inner += acc * probs[b, i, j]
            for j in range(t):
                p = probs[b, i, j]
                ds = p * (dprow[j] - inner) * scale
                for c in range(d):
                    dq[b, i, c] += ds * k[b, j, c]
                    dk[b, j, c] += ds * q[b, i, c]
                    dv[b, j, c] += p * dout[b, i, c]
    return dq, dk, dv


@njit(cache=True)
def layer_norm_fwd(x, gain, bias, eps):
    n, w = x.shape
    y = np.empty_like(x)
    mean = np.empty(n)
    rstd = np.empty(n)
    for i in range(n):
        m = 0.0
        for j in range(w):
            m += x[i, j]
        m /= w
        var = 0.0
        for j in range(w):
            d = x[i, j] - m
            var += d * d
        var /= w
        r = 1.0 / np.sqrt(var + eps)
        mean[i] = m
        rstd[i] = r
        for j in range(w):
            y[i, j] = (x[i, j] - m) * r * gain[j] + bias[j]
    return y, mean, rstd


@njit(cache=True)
def layer_norm_bwd(dy, x, gain, mean, rstd):
    n, w = x.shape
    dx = np.empty_like(x)
    dgain = np.zeros(w)
    dbias = np.zeros(w)
    for i in range(n):
        m1 = 0.0
        m2 = 0.0
        for j in range(w):
            xhat = (x[i, j] - mean[i]) * rstd[i]
            dxhat = dy[i, j] * gain[j]
            dgain[j] += dy[i, j] * xhat
            dbias[j] += dy[i, j]
            m1 += dxhat
            m2 += dxhat * xhat
        m1 /= w
        m2 /= w
        for j in range(w):
            xhat = (x[i, j] - mean[i]) * rstd[i]
            dxhat = dy[i, j] * gain[j]
            dx[i, j] = rstd[i] * (dxhat - m1 - xhat * m2)
    return dx, dgain, dbias

"""Pure-numpy reference implementations of the hot kernels.

Shapes are normalized by the callers: attention kernels take stacked 3-D
arrays (batch*heads, seq, dim), layer norm takes 2-D (rows, features).
Blocked attention scores receive a large negative additive constant
before the softmax, so their probabilities underflow to exactly zero.
"""

import numpy as np

MASK_FILL = -1e9


def masked_softmax_fwd(scores, mask):
    """Row softmax of (N, R, C) scores; mask (R, C) False entries blocked."""
    shifted = np.where(mask, scores, scores + MASK_FILL)
    shifted = shifted - shifted.max(axis=-1, keepdims=True)
    probs = np.exp(shifted)
    probs /= probs.sum(axis=-1, keepdims=True)
    return probs


def masked_softmax_bwd(dprobs, probs):
    """Gradient wrt scores. Blocked entries hold probs == 0, so they get 0."""
    inner = (dprobs * probs).sum(axis=-1, keepdims=True)
    return probs * (dprobs - inner)


def attention_fwd(q, k, v, mask, scale):
    """Fused softmax(q @ k.T * scale + mask fill) @ v.

    q, k, v: (N, T, D); mask: (T, T) bool. Returns (out, probs) where
    probs are kept for the backward pass.
    """
    scores = np.matmul(q, np.swapaxes(k, -1, -2)) * scale
    probs = masked_softmax_fwd(scores, mask)
    out = np.matmul(probs, v)
    return out, probs


def attention_bwd(dout, probs, q, k, v, scale):
    """Gradients of attention_fwd wrt q, k, v given stored probs."""
    dv = np.matmul(np.swapaxes(probs, -1, -2), dout)
    dprobs = np.matmul(dout, np.swapaxes(v, -1, -2))
    dscores = masked_softmax_bwd(dprobs, probs) * scale
    dq = np.matmul(dscores, k)
    dk = np.matmul(np.swapaxes(dscores, -1, -2), q)
    return dq, dk, dv


def layer_norm_fwd(x, gain, bias, eps):
    """Normalize rows of (N, W) to zero mean, unit variance, then affine."""
    mean = x.mean(axis=-1)
    var = ((x - mean[:, None]) ** 2).mean(axis=-1)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean[:, None]) * rstd[:, None]
    return xhat * gain + bias, mean, rstd


def layer_norm_bwd(dy, x, gain, mean, rstd):
    xhat = (x - mean[:, None]) * rstd[:, None]
    dgain = (dy * xhat).sum(axis=0)
    dbias = dy.sum(axis=0)
    dxhat = dy * gain
    m1 = dxhat.mean(axis=-1, keepdims=True)
    m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
    dx = rstd[:, None] * (dxhat - m1 - xhat * m2)
    return dx, dgain, dbias

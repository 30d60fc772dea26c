"""Minimal reverse-mode autodiff engine over float64 numpy arrays.

Graphs are built by running operations on :class:`Tensor` objects
(define-by-run). Each operation records its parents and a closure that
propagates gradients; :func:`backward` replays them in reverse
topological order, visiting every node exactly once.

The op set is exactly what the models need: elementwise arithmetic with
broadcasting, matmul, tanh/sigmoid/relu, softmax with an additive mask,
fused scaled-dot-product attention, 1-D convolution and its transpose,
mean/sum reductions, reshape/transpose, layer normalization and a
numerically stable binary cross-entropy on logits.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import GraphError, MaskError, NonFiniteError, ShapeError

_grad_enabled = True


class no_grad:
    """Context manager that disables graph recording (pure inference)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class Tensor:
    """A node in the computation graph: float64 values plus gradient slot."""

    __slots__ = ("values", "grad", "requires_grad", "op", "_parents", "_backward")

    def __init__(self, values, requires_grad=False, op="leaf"):
        self.values = np.asarray(values, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self.op = op
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.values.shape

    def __repr__(self):
        return f"Tensor(shape={self.values.shape}, op={self.op!r})"

    def backward(self, seed=None):
        backward(self, seed)

    # operator sugar; scalars and ndarrays are coerced to constant leaves
    def __add__(self, other):
        return add(self, as_tensor(other))

    def __radd__(self, other):
        return add(as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, as_tensor(other))

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, as_tensor(other))

    def __rmul__(self, other):
        return mul(as_tensor(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, as_tensor(other))


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(values, parents, op, backward_fn):
    """Create an op node; skips recording when no parent needs gradients."""
    if _grad_enabled and any(p.requires_grad for p in parents):
        out = Tensor(values, requires_grad=True, op=op)
        out._parents = tuple(parents)
        out._backward = backward_fn
        return out
    return Tensor(values, op=op)


def _accumulate(node, grad):
    if node.grad is None:
        node.grad = grad
    else:
        node.grad = node.grad + grad


def _unbroadcast(grad, shape):
    """Sum grad down to `shape` after numpy broadcasting."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def backward(out: Tensor, seed=None) -> None:
    """Propagate gradients from `out` to every reachable parameter.

    `seed` defaults to 1.0 and requires a scalar output; pass an explicit
    array to seed a non-scalar output.
    """
    if out._backward is None and not out.requires_grad:
        raise GraphError("backward called on a node with no recorded graph")
    if seed is None:
        if out.values.ndim != 0 and out.values.size != 1:
            raise GraphError("backward without a seed requires a scalar output")
        seed = np.ones_like(out.values)
    else:
        seed = np.asarray(seed, dtype=np.float64)
        if seed.shape != out.values.shape:
            raise ShapeError(
                f"backward: seed shape {seed.shape} != output shape {out.values.shape}"
            )

    topo = []
    visited = set()
    stack = [(out, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited and p.requires_grad:
                stack.append((p, False))

    out.grad = seed
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


def grad_of(param: Tensor) -> np.ndarray:
    """Gradient of a parameter; zeros when unreachable from the output."""
    if param.grad is None:
        return np.zeros_like(param.values)
    return param.grad


def zero_grads(params) -> None:
    for p in params:
        p.grad = None


def evaluate(fn, inputs: dict) -> dict:
    """Run a graph-building function on named arrays and return named outputs.

    Raises NonFiniteError if any requested output contains NaN/Inf.
    """
    tensors = {name: as_tensor(np.asarray(v, dtype=np.float64)) for name, v in inputs.items()}
    outputs = fn(**tensors)
    if isinstance(outputs, Tensor):
        outputs = {"out": outputs}
    result = {}
    for name, node in outputs.items():
        vals = node.values if isinstance(node, Tensor) else np.asarray(node)
        if not np.all(np.isfinite(vals)):
            raise NonFiniteError(f"output {name!r} contains non-finite values")
        result[name] = vals
    return result


# ---------------------------------------------------------------------------
# elementwise and linear ops


def add(a: Tensor, b: Tensor) -> Tensor:
    values = a.values + b.values

    def bwd(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g, a.values.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g, b.values.shape))

    return _make(values, (a, b), "add", bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    values = a.values - b.values

    def bwd(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g, a.values.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(-g, b.values.shape))

    return _make(values, (a, b), "sub", bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    values = a.values * b.values

    def bwd(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g * b.values, a.values.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g * a.values, b.values.shape))

    return _make(values, (a, b), "mul", bwd)


def neg(a: Tensor) -> Tensor:
    def bwd(g):
        _accumulate(a, -g)

    return _make(-a.values, (a,), "neg", bwd)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.values.ndim < 2 or b.values.ndim < 2:
        raise ShapeError("matmul: operands must be at least 2-D")
    if a.values.shape[-1] != b.values.shape[-2]:
        raise ShapeError(
            f"matmul: inner dimensions {a.values.shape} @ {b.values.shape}"
        )
    values = np.matmul(a.values, b.values)

    def bwd(g):
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(b.values, -1, -2))
            _accumulate(a, _unbroadcast(ga, a.values.shape))
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(a.values, -1, -2), g)
            _accumulate(b, _unbroadcast(gb, b.values.shape))

    return _make(values, (a, b), "matmul", bwd)


def tanh(a: Tensor) -> Tensor:
    values = np.tanh(a.values)

    def bwd(g):
        _accumulate(a, g * (1.0 - values * values))

    return _make(values, (a,), "tanh", bwd)


def sigmoid(a: Tensor) -> Tensor:
    x = a.values
    values = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))

    def bwd(g):
        _accumulate(a, g * values * (1.0 - values))

    return _make(values, (a,), "sigmoid", bwd)


def relu(a: Tensor) -> Tensor:
    values = np.maximum(a.values, 0.0)

    def bwd(g):
        _accumulate(a, g * (a.values > 0.0))

    return _make(values, (a,), "relu", bwd)


# ---------------------------------------------------------------------------
# shape ops


def reshape(a: Tensor, shape) -> Tensor:
    values = a.values.reshape(shape)

    def bwd(g):
        _accumulate(a, g.reshape(a.values.shape))

    return _make(values, (a,), "reshape", bwd)


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    values = np.transpose(a.values, axes)

    def bwd(g):
        _accumulate(a, np.transpose(g, inverse))

    return _make(values, (a,), "transpose", bwd)


# ---------------------------------------------------------------------------
# reductions


def _axis_tuple(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        return (axis % ndim,)
    return tuple(sorted(ax % ndim for ax in axis))


def sum_(a: Tensor, axis=None, keepdims=False) -> Tensor:
    axes = _axis_tuple(axis, a.values.ndim)
    values = a.values.sum(axis=axes, keepdims=keepdims)

    def bwd(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        _accumulate(a, np.broadcast_to(g, a.values.shape).copy())

    return _make(values, (a,), "sum", bwd)


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    axes = _axis_tuple(axis, a.values.ndim)
    count = float(np.prod([a.values.shape[ax] for ax in axes]))
    values = a.values.mean(axis=axes, keepdims=keepdims)

    def bwd(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        _accumulate(a, np.broadcast_to(g / count, a.values.shape).copy())

    return _make(values, (a,), "mean", bwd)


# ---------------------------------------------------------------------------
# softmax / attention


def _check_mask(mask, shape, op):
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != shape:
        raise ShapeError(f"{op}: mask shape {mask.shape}, expected {shape}")
    if not mask.any(axis=1).all():
        raise MaskError(f"{op}: mask blocks an entire row")
    return mask


def masked_softmax(scores: Tensor, mask=None) -> Tensor:
    """Softmax over the last axis of (..., R, C) scores with an additive mask.

    Blocked entries (mask False) receive a large negative constant before
    the softmax; their probabilities underflow to exactly zero.
    """
    if scores.values.ndim < 2:
        raise ShapeError(f"masked_softmax: scores must be (..., R, C), got {scores.values.shape}")
    rows, cols = scores.values.shape[-2:]
    if mask is None:
        mask = np.ones((rows, cols), dtype=bool)
    mask = _check_mask(mask, (rows, cols), "masked_softmax")
    lead = scores.values.shape[:-2]
    flat = np.ascontiguousarray(scores.values.reshape((-1, rows, cols)))
    probs = kernels.masked_softmax_fwd(flat, mask)
    values = probs.reshape(lead + (rows, cols))

    def bwd(g):
        dflat = kernels.masked_softmax_bwd(
            np.ascontiguousarray(g.reshape((-1, rows, cols))), probs
        )
        _accumulate(scores, dflat.reshape(scores.values.shape))

    return _make(values, (scores,), "masked_softmax", bwd)


def softmax(scores: Tensor) -> Tensor:
    """Plain softmax over the last axis; rows are the second-to-last axis."""
    return masked_softmax(scores, None)


def attention(q: Tensor, k: Tensor, v: Tensor, mask=None) -> Tensor:
    """Fused scaled dot-product attention: softmax(q kᵀ / sqrt(d)) v.

    q, k, v are (..., T, D) with identical shapes; mask is (T, T) bool
    (None = full attention). One graph node; the backward pass reuses the
    stored attention probabilities.
    """
    if q.values.shape != k.values.shape or q.values.shape != v.values.shape:
        raise ShapeError(
            f"attention: q/k/v shapes differ: {q.values.shape}, {k.values.shape}, {v.values.shape}"
        )
    if q.values.ndim < 2:
        raise ShapeError("attention: q/k/v must be at least 2-D")
    t, d = q.values.shape[-2:]
    if mask is None:
        mask = np.ones((t, t), dtype=bool)
    mask = _check_mask(mask, (t, t), "attention")
    scale = 1.0 / np.sqrt(float(d))
    lead = q.values.shape[:-2]
    q3 = np.ascontiguousarray(q.values.reshape((-1, t, d)))
    k3 = np.ascontiguousarray(k.values.reshape((-1, t, d)))
    v3 = np.ascontiguousarray(v.values.reshape((-1, t, d)))
    out3, probs = kernels.attention_fwd(q3, k3, v3, mask, scale)

    def bwd(g):
        g3 = np.ascontiguousarray(g.reshape((-1, t, d)))
        dq, dk, dv = kernels.attention_bwd(g3, probs, q3, k3, v3, scale)
        if q.requires_grad:
            _accumulate(q, dq.reshape(q.values.shape))
        if k.requires_grad:
            _accumulate(k, dk.reshape(k.values.shape))
        if v.requires_grad:
            _accumulate(v, dv.reshape(v.values.shape))

    return _make(out3.reshape(lead + (t, d)), (q, k, v), "attention", bwd)


# ---------------------------------------------------------------------------
# 1-D convolution (stride 1, same padding), channels-last


def _im2col(x, ksize):
    b, t, c = x.shape
    left = (ksize - 1) // 2
    xpad = np.zeros((b, t + ksize - 1, c))
    xpad[:, left : left + t, :] = x
    cols = np.empty((b, t, ksize, c))
    for dk in range(ksize):
        cols[:, :, dk, :] = xpad[:, dk : dk + t, :]
    return cols


def conv1d(x: Tensor, w: Tensor) -> Tensor:
    """Same-padded stride-1 convolution of (B, T, Cin) with (K, Cin, Cout)."""
    if x.values.ndim != 3 or w.values.ndim != 3:
        raise ShapeError("conv1d: x must be (B, T, Cin) and w (K, Cin, Cout)")
    b, t, cin = x.values.shape
    ksize, wcin, cout = w.values.shape
    if wcin != cin:
        raise ShapeError(f"conv1d: channel mismatch x={cin} w={wcin}")
    cols = _im2col(x.values, ksize)
    values = cols.reshape(b * t, ksize * cin) @ w.values.reshape(ksize * cin, cout)
    values = values.reshape(b, t, cout)

    def bwd(g):
        gflat = g.reshape(b * t, cout)
        if w.requires_grad:
            dw = cols.reshape(b * t, ksize * cin).T @ gflat
            _accumulate(w, dw.reshape(ksize, cin, cout))
        if x.requires_grad:
            dcols = (gflat @ w.values.reshape(ksize * cin, cout).T).reshape(b, t, ksize, cin)
            left = (ksize - 1) // 2
            dxpad = np.zeros((b, t + ksize - 1, cin))
            for dk in range(ksize):
                dxpad[:, dk : dk + t, :] += dcols[:, :, dk, :]
            _accumulate(x, dxpad[:, left : left + t, :])

    return _make(values, (x, w), "conv1d", bwd)


def conv1d_transpose(x: Tensor, w: Tensor) -> Tensor:
    """Transposed counterpart of conv1d: (B, T, Cin) with (K, Cout, Cin).

    With stride 1 and same padding this is the adjoint of conv1d, i.e.
    a correlation with the tap-reversed kernel.
    """
    if x.values.ndim != 3 or w.values.ndim != 3:
        raise ShapeError("conv1d_transpose: x must be (B, T, Cin) and w (K, Cout, Cin)")
    b, t, cin = x.values.shape
    ksize, cout, wcin = w.values.shape
    if wcin != cin:
        raise ShapeError(f"conv1d_transpose: channel mismatch x={cin} w={wcin}")
    # adjoint of conv1d(y, w): scatter each input step into the kernel taps
    left = (ksize - 1) // 2
    xflat = x.values.reshape(b * t, cin)
    spread = (xflat @ w.values.reshape(ksize * cout, cin).T).reshape(b, t, ksize, cout)
    ypad = np.zeros((b, t + ksize - 1, cout))
    for dk in range(ksize):
        ypad[:, dk : dk + t, :] += spread[:, :, dk, :]
    values = ypad[:, left : left + t, :]

    def bwd(g):
        gcols = _im2col(g, ksize)
        if x.requires_grad:
            dx = gcols.reshape(b * t, ksize * cout) @ w.values.reshape(ksize * cout, cin)
            _accumulate(x, dx.reshape(b, t, cin))
        if w.requires_grad:
            dw = gcols.reshape(b * t, ksize * cout).T @ xflat
            _accumulate(w, dw.reshape(ksize, cout, cin))

    return _make(values, (x, w), "conv1d_transpose", bwd)


# ---------------------------------------------------------------------------
# layer normalization


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    w = x.values.shape[-1]
    if gain.values.shape != (w,) or bias.values.shape != (w,):
        raise ShapeError(f"layer_norm: gain/bias must be ({w},)")
    flat = np.ascontiguousarray(x.values.reshape(-1, w))
    y, mu, rstd = kernels.layer_norm_fwd(flat, gain.values, bias.values, eps)

    def bwd(g):
        dx, dgain, dbias = kernels.layer_norm_bwd(
            np.ascontiguousarray(g.reshape(-1, w)), flat, gain.values, mu, rstd
        )
        if x.requires_grad:
            _accumulate(x, dx.reshape(x.values.shape))
        if gain.requires_grad:
            _accumulate(gain, dgain)
        if bias.requires_grad:
            _accumulate(bias, dbias)

    return _make(y.reshape(x.values.shape), (x, gain, bias), "layer_norm", bwd)


# ---------------------------------------------------------------------------
# losses


def bce_with_logits(logits: Tensor, targets) -> Tensor:
    """Mean binary cross-entropy on raw logits (numerically stable)."""
    t = np.asarray(targets, dtype=np.float64)
    if t.shape != logits.values.shape:
        raise ShapeError(
            f"bce_with_logits: targets shape {t.shape} != logits shape {logits.values.shape}"
        )
    z = logits.values
    # log(1 + exp(-|z|)) + max(z, 0) - z*t
    values = np.mean(np.log1p(np.exp(-np.abs(z))) + np.maximum(z, 0.0) - z * t)
    n = z.size

    def bwd(g):
        p = np.where(z >= 0, 1.0 / (1.0 + np.exp(-z)), np.exp(z) / (1.0 + np.exp(z)))
        _accumulate(logits, g * (p - t) / n)

    return _make(values, (logits,), "bce_with_logits", bwd)


def mse(pred: Tensor, target) -> Tensor:
    """Mean squared error over every element."""
    target = as_tensor(target)
    if pred.values.shape != target.values.shape:
        raise ShapeError(
            f"mse: shapes {pred.values.shape} vs {target.values.shape}"
        )
    diff = sub(pred, target)
    return mean(mul(diff, diff))


# ---------------------------------------------------------------------------
# gradient checking oracle


def finite_difference_gradient(fn, params: dict, eps: float = 1e-5) -> dict:
    """Central finite differences of a scalar-valued fn over named arrays.

    fn receives a dict of plain ndarrays and must return a float (or 0-d
    array); the estimate is (f(p+eps) - f(p-eps)) / (2 eps) per entry.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    work = {name: np.array(v, dtype=np.float64) for name, v in params.items()}

    def call():
        out = fn(work)
        out = np.asarray(out, dtype=np.float64)
        if out.ndim != 0 and out.size != 1:
            raise GraphError("finite_difference_gradient requires a scalar output")
        return float(out)

    grads = {}
    for name, arr in work.items():
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = call()
            flat[i] = orig - eps
            lo = call()
            flat[i] = orig
            gflat[i] = (hi - lo) / (2.0 * eps)
        grads[name] = g
    return grads


def gradient_check(fn, params: dict, eps: float = 1e-5) -> float:
    """Max elementwise relative error |analytic - fd| / max(1, |fd|).

    fn maps a dict name->Tensor to a scalar Tensor; parameters are fresh
    Tensors per call so graphs never leak between evaluations.
    """
    tensors = {n: Tensor(v, requires_grad=True) for n, v in params.items()}
    out = fn(tensors)
    backward(out)
    analytic = {n: grad_of(t) for n, t in tensors.items()}

    def plain(arrs):
        frozen = {n: Tensor(v) for n, v in arrs.items()}
        return fn(frozen).values

    fd = finite_difference_gradient(plain, params, eps)
    worst = 0.0
    for n in params:
        err = np.abs(analytic[n] - fd[n]) / np.maximum(1.0, np.abs(fd[n]))
        worst = max(worst, float(err.max()) if err.size else 0.0)
    return worst


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    """Per-parameter moment estimates for the adaptive-moment optimizer."""

    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState) -> None:
    """One bias-corrected adaptive-moment update, in place.

    params maps names to Tensors; grads maps the same names to arrays.
    """
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    correction1 = 1.0 - b1 ** t
    correction2 = 1.0 - b2 ** t
    for name in sorted(params):
        p = params[name]
        g = grads[name]
        if g.shape != p.values.shape:
            raise ShapeError(f"adam_step: grad shape {g.shape} != param {p.values.shape} ({name})")
        if name not in state.m:
            state.m[name] = np.zeros_like(p.values)
            state.v[name] = np.zeros_like(p.values)
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        mhat = m / correction1
        vhat = v / correction2
        p.values -= state.learning_rate * mhat / (np.sqrt(vhat) + state.eps)

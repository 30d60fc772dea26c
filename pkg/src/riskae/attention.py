"""Attention masks and multi-head scaled dot-product attention.

Local attention restricts each position to a window of neighbours: for
position i with window size w the admissible key range is the half-open
interval [max(0, i - w//2), min(seq_len, i + w//2 + 1)). Masks are plain
boolean matrices (True = attend) consumed by the autodiff attention op,
which adds a large negative constant to blocked scores so they vanish
in the softmax.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ShapeError


def local_window_bounds(i: int, seq_len: int, w: int) -> tuple[int, int]:
    """Half-open [start, end) key range of position i for window size w."""
    if not 0 <= i < seq_len:
        raise IndexError(f"position {i} out of range for seq_len {seq_len}")
    if w < 1:
        raise ValueError(f"window size must be >= 1, got {w}")
    half = w // 2
    start = max(0, i - half)
    end = min(seq_len, i + half + 1)
    return start, end


def build_local_mask(seq_len: int, w: int) -> np.ndarray:
    """Boolean (seq_len, seq_len) mask with each row's local window True."""
    if seq_len < 1:
        raise ValueError(f"seq_len must be >= 1, got {seq_len}")
    mask = np.zeros((seq_len, seq_len), dtype=bool)
    for i in range(seq_len):
        start, end = local_window_bounds(i, seq_len, w)
        mask[i, start:end] = True
    return mask


def build_causal_mask(seq_len: int) -> np.ndarray:
    """Lower-triangular mask: position i attends to positions j <= i."""
    if seq_len < 1:
        raise ValueError(f"seq_len must be >= 1, got {seq_len}")
    return np.tril(np.ones((seq_len, seq_len), dtype=bool))


def build_full_mask(seq_len: int) -> np.ndarray:
    """All-true mask; attention degenerates to the unrestricted form."""
    return np.ones((seq_len, seq_len), dtype=bool)


def scaled_dot_product_attention(q, k, v, mask=None) -> ad.Tensor:
    """softmax(q kᵀ / sqrt(d_k)) v with an optional boolean mask.

    Accepts Tensors or arrays shaped (..., seq_len, d_k); rows blocked by
    the mask are excluded from the softmax and never influence the output.
    """
    return ad.attention(ad.as_tensor(q), ad.as_tensor(k), ad.as_tensor(v), mask)


@dataclass
class AttentionParams:
    """Projections for multi-head attention over a width = heads * head_dim model."""

    wq: ad.Tensor
    bq: ad.Tensor
    wk: ad.Tensor
    bk: ad.Tensor
    wv: ad.Tensor
    bv: ad.Tensor
    wo: ad.Tensor
    bo: ad.Tensor
    heads: int
    head_dim: int

    def named(self, prefix: str) -> dict:
        return {
            f"{prefix}/wq": self.wq,
            f"{prefix}/bq": self.bq,
            f"{prefix}/wk": self.wk,
            f"{prefix}/bk": self.bk,
            f"{prefix}/wv": self.wv,
            f"{prefix}/bv": self.bv,
            f"{prefix}/wo": self.wo,
            f"{prefix}/bo": self.bo,
        }


def init_attention_params(rng: np.random.Generator, heads: int, head_dim: int) -> AttentionParams:
    """Glorot-uniform projections for a width = heads * head_dim block."""
    if heads < 1 or head_dim < 1:
        raise ValueError("heads and head_dim must be >= 1")
    width = heads * head_dim

    def glorot(fan_in, fan_out):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        return ad.Tensor(rng.uniform(-limit, limit, size=(fan_in, fan_out)), requires_grad=True)

    def zeros(n):
        return ad.Tensor(np.zeros(n), requires_grad=True)

    return AttentionParams(
        wq=glorot(width, width), bq=zeros(width),
        wk=glorot(width, width), bk=zeros(width),
        wv=glorot(width, width), bv=zeros(width),
        wo=glorot(width, width), bo=zeros(width),
        heads=heads, head_dim=head_dim,
    )


def _split_heads(x: ad.Tensor, heads: int, head_dim: int) -> ad.Tensor:
    b, t, _ = x.values.shape
    x = ad.reshape(x, (b, t, heads, head_dim))
    return ad.transpose(x, (0, 2, 1, 3))


def _merge_heads(x: ad.Tensor) -> ad.Tensor:
    b, h, t, d = x.values.shape
    x = ad.transpose(x, (0, 2, 1, 3))
    return ad.reshape(x, (b, t, h * d))


def multi_head_attention(x, params: AttentionParams, mask=None) -> ad.Tensor:
    """Multi-head self-attention over (B, seq_len, width) input.

    Heads attend independently on projected q/k/v slices; their outputs
    are concatenated and passed through the output projection.
    """
    x = ad.as_tensor(x)
    if x.values.ndim != 3:
        raise ShapeError(f"multi_head_attention: expected (B, T, width), got {x.values.shape}")
    width = params.heads * params.head_dim
    if x.values.shape[-1] != width:
        raise ShapeError(
            f"multi_head_attention: input width {x.values.shape[-1]} != heads*head_dim {width}"
        )
    q = _split_heads(ad.matmul(x, params.wq) + params.bq, params.heads, params.head_dim)
    k = _split_heads(ad.matmul(x, params.wk) + params.bk, params.heads, params.head_dim)
    v = _split_heads(ad.matmul(x, params.wv) + params.bv, params.heads, params.head_dim)
    ctx = ad.attention(q, k, v, mask)
    return ad.matmul(_merge_heads(ctx), params.wo) + params.bo

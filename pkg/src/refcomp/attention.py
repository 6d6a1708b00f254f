"""Dual-stream interaction operators.

The reference stream refines itself through plain self-attention; the
background stream queries a key/value set built from the concatenation of
background and reference tokens (mixture attention).  One parameter record
serves both streams when the backbone is shared.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .engine import Parameter, ShapeError, Tensor, concat, matmul, mul, softmax


class StreamTag(Enum):
    REFERENCE = "reference"
    BACKGROUND = "background"


@dataclass
class AttentionParams:
    """Projection matrices shared by queries, keys and values of both streams."""

    w_q: Parameter
    w_k: Parameter
    w_v: Parameter
    heads: int

    def __post_init__(self):
        d = self.w_q.shape[0]
        for w in (self.w_q, self.w_k, self.w_v):
            if w.shape != (d, d):
                raise ShapeError(f"projection must be square {d}x{d}, got {w.shape}")
        if self.heads < 1 or d % self.heads:
            raise ShapeError(f"width {d} not divisible into {self.heads} heads")

    @property
    def d_model(self) -> int:
        return self.w_q.shape[0]

    @property
    def d_head(self) -> int:
        return self.d_model // self.heads

    def parameters(self):
        return [self.w_q, self.w_k, self.w_v]


def init_attention_params(d_model: int, heads: int, rng: np.random.Generator,
                          name: str, zero_value: bool = False) -> AttentionParams:
    scale = 1.0 / math.sqrt(d_model)
    def w(suffix, zero):
        data = np.zeros((d_model, d_model)) if zero else rng.normal(0.0, scale, (d_model, d_model))
        return Parameter(f"{name}.{suffix}", data.astype(np.float32))
    return AttentionParams(w("wq", False), w("wk", False), w("wv", zero_value), heads)


def _split_heads(x: Tensor, heads: int, d_head: int) -> Tensor:
    n, t = x.shape[0], x.shape[1]
    return x.reshape(n, t, heads, d_head).transpose((0, 2, 1, 3))


def _attend(queries_from: Tensor, keys_values_from: Tensor, p: AttentionParams) -> Tensor:
    """Token matrices may be (T, d) or batched (N, T, d); batches pair up."""
    if queries_from.shape[-2] == 0:
        raise ShapeError("attention needs at least one query token")
    if queries_from.shape[-1] != p.d_model or keys_values_from.shape[-1] != p.d_model:
        raise ShapeError(
            f"token width mismatch: queries {queries_from.shape}, "
            f"keys/values {keys_values_from.shape}, params {p.d_model}")
    single = queries_from.ndim == 2
    if single:
        queries_from = queries_from.reshape(1, *queries_from.shape)
        keys_values_from = keys_values_from.reshape(1, *keys_values_from.shape)
    n, t = queries_from.shape[0], queries_from.shape[1]
    q = _split_heads(matmul(queries_from, p.w_q), p.heads, p.d_head)
    k = _split_heads(matmul(keys_values_from, p.w_k), p.heads, p.d_head)
    v = _split_heads(matmul(keys_values_from, p.w_v), p.heads, p.d_head)
    logits = mul(matmul(q, k.transpose((0, 1, 3, 2))), 1.0 / math.sqrt(p.d_head))
    weights = softmax(logits, axis=-1)
    per_head = matmul(weights, v)
    out = per_head.transpose((0, 2, 1, 3)).reshape(n, t, p.d_model)
    return out.reshape(t, p.d_model) if single else out


def self_attention(x: Tensor, p: AttentionParams) -> Tensor:
    """softmax(Q K^T / sqrt(d_head)) V with Q, K, V all projected from x."""
    return _attend(x, x, p)


def mixture_attention(x_bg: Tensor, x_ref: Tensor | None, p: AttentionParams) -> Tensor:
    """Background queries over concatenated background+reference keys/values.

    An absent or empty reference reduces exactly to self-attention on the
    background tokens.
    """
    if x_ref is None or x_ref.shape[-2] == 0:
        return _attend(x_bg, x_bg, p)
    if x_ref.shape[-1] != x_bg.shape[-1] or x_ref.ndim != x_bg.ndim:
        raise ShapeError(f"stream width mismatch: background {x_bg.shape}, reference {x_ref.shape}")
    return _attend(x_bg, concat([x_bg, x_ref], axis=-2), p)

"""Multi-head attention, feed-forward and normalisation primitives.

All modules accept ``(L, d)`` or ``(B, L, d)`` inputs.  Boolean masks use
``True`` for positions that may be attended to.
"""
from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import nn

from .errors import NumericError, ShapeError

LN_EPS = 1e-9


def softmax(logits, dim=-1):
    return torch.softmax(logits, dim=dim)


def layer_norm(x, weight=None, bias=None, eps=LN_EPS):
    return F.layer_norm(x, x.shape[-1:], weight, bias, eps)


def LayerNorm(d):
    return nn.LayerNorm(d, eps=LN_EPS)


def check_finite(*tensors):
    for t in tensors:
        if not torch.isfinite(t).all():
            raise NumericError("non-finite values in attention input")


class FeedForward(nn.Module):
    def __init__(self, d_model, d_hidden=None):
        super().__init__()
        d_hidden = d_hidden or 4 * d_model
        self.fc1 = nn.Linear(d_model, d_hidden)
        self.fc2 = nn.Linear(d_hidden, d_model)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x)))


class MultiHeadAttention(nn.Module):
    """Scaled dot-product attention with per-head projections; no residual."""

    def __init__(self, d_model, n_heads, d_context=None):
        super().__init__()
        if d_model % n_heads:
            raise ShapeError(f"d_model={d_model} is not divisible by n_heads={n_heads}")
        d_context = d_context or d_model
        self.d_model, self.n_heads, self.d_head = d_model, n_heads, d_model // n_heads
        self.q_proj = nn.Linear(d_model, d_model)
        self.k_proj = nn.Linear(d_context, d_model)
        self.v_proj = nn.Linear(d_context, d_model)
        self.out_proj = nn.Linear(d_model, d_model)

    def _split(self, x):
        b, n, _ = x.shape
        return x.view(b, n, self.n_heads, self.d_head).transpose(1, 2)

    def forward(self, query, context, mask=None, return_weights=False):
        squeeze = query.dim() == 2
        if squeeze:
            query, context = query.unsqueeze(0), context.unsqueeze(0)
        if query.shape[1] == 0 or context.shape[1] == 0:
            raise ShapeError("attention needs at least one query and one context token")
        if query.shape[-1] != self.d_model or context.shape[-1] != self.k_proj.in_features:
            raise ShapeError(f"attention width mismatch: query {tuple(query.shape)}, context {tuple(context.shape)}")
        check_finite(query, context)
        q, k, v = self._split(self.q_proj(query)), self._split(self.k_proj(context)), self._split(self.v_proj(context))
        logits = q @ k.transpose(-1, -2) / math.sqrt(self.d_head)
        if mask is not None:
            if mask.dtype == torch.bool:
                logits = logits.masked_fill(~mask, float("-inf"))
            else:
                logits = logits + mask
        weights = torch.softmax(logits, dim=-1)
        out = (weights @ v).transpose(1, 2).reshape(query.shape[0], query.shape[1], self.d_model)
        out = self.out_proj(out)
        if squeeze:
            out, weights = out[0], weights[0]
        return (out, weights) if return_weights else out


def self_attention(tokens, attn: MultiHeadAttention, mask=None):
    """Residual self-attention: ``x + MHA(x, x)``."""
    return tokens + attn(tokens, tokens, mask)


def cross_attention(queries, context, attn: MultiHeadAttention, mask=None):
    """Residual cross-attention: ``q + MHA(q, context)``."""
    return queries + attn(queries, context, mask)


def causal_mask(n, device=None):
    return torch.ones(n, n, dtype=torch.bool, device=device).tril()

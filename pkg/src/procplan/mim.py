"""Visual-state interaction, the query transformer and the mutual-information losses."""
from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn

from .attention import FeedForward, LayerNorm, MultiHeadAttention, self_attention
from .errors import NumericError, ShapeError, ValidationError


class StateInteraction(nn.Module):
    """Self-attention over the two visual state tokens."""

    def __init__(self, d_model, n_heads):
        super().__init__()
        self.attn = MultiHeadAttention(d_model, n_heads)

    def forward(self, x0, xT):
        if x0.shape != xT.shape:
            raise ShapeError(f"start/goal embeddings differ in shape: {tuple(x0.shape)} vs {tuple(xT.shape)}")
        tokens = self_attention(torch.stack([x0, xT], dim=-2), self.attn)
        return tokens[..., 0, :], tokens[..., 1, :]


class QFormerBlock(nn.Module):
    def __init__(self, d_model, n_heads):
        super().__init__()
        self.ln_self = LayerNorm(d_model)
        self.self_attn = MultiHeadAttention(d_model, n_heads)
        self.ln_cross = LayerNorm(d_model)
        self.cross_attn = MultiHeadAttention(d_model, n_heads)
        self.ln_ff = LayerNorm(d_model)
        self.ff = FeedForward(d_model)

    def forward(self, queries, visual, text=None, text_visible=True):
        n_q = queries.shape[-2]
        stream = queries if text is None else torch.cat([queries, text], dim=-2)
        mask = None
        if text is not None and not text_visible:
            n = stream.shape[-2]
            mask = torch.ones(n, n, dtype=torch.bool)
            mask[:n_q, n_q:] = False
        h = self.ln_self(stream)
        stream = stream + self.self_attn(h, h, mask)
        queries, text = stream[..., :n_q, :], (stream[..., n_q:, :] if text is not None else None)
        queries = queries + self.cross_attn(self.ln_cross(queries), visual)
        queries = queries + self.ff(self.ln_ff(queries))
        if text is not None:
            text = text + self.ff(self.ln_ff(text))
        return queries, text


class QFormer(nn.Module):
    """Learnable step queries fused with visual tokens (and, in training, step-text tokens)."""

    def __init__(self, horizon, d_model, n_heads, n_blocks=2):
        super().__init__()
        self.horizon = horizon
        self.queries = nn.Parameter(torch.randn(horizon, d_model) * 0.02)
        self.blocks = nn.ModuleList(QFormerBlock(d_model, n_heads) for _ in range(n_blocks))

    def forward(self, visual, text=None, text_visible=True, queries=None):
        """visual: (B, 2, d) tokens; text: optional (B, T, d) step embeddings.

        Text tokens only join the self-attention stream; with ``text_visible=False``
        the queries cannot see them and the output equals the text-free result.
        """
        if visual.shape[-2] != 2:
            raise ShapeError(f"expected exactly 2 visual tokens, got {visual.shape[-2]}")
        q = self.queries if queries is None else queries
        if q.shape[-2] != self.horizon:
            raise ShapeError(f"expected {self.horizon} step queries, got {q.shape[-2]}")
        if visual.dim() == 3 and q.dim() == 2:
            q = q.expand(visual.shape[0], -1, -1)
        for block in self.blocks:
            q, text = block(q, visual, text, text_visible)
        return q


class MatchHead(nn.Module):
    """Pair (visual, query) -> one matching logit."""

    def __init__(self, d_model, d_hidden=None):
        super().__init__()
        d_hidden = d_hidden or d_model
        self.hidden = nn.Linear(2 * d_model, d_hidden)
        self.out = nn.Linear(d_hidden, 1)

    def forward(self, xv, xq):
        return self.out(torch.tanh(self.hidden(torch.cat([xv, xq], dim=-1)))).squeeze(-1)

    def pair_logits(self, xv, xq):
        b = xv.shape[0]
        return self(xv.unsqueeze(1).expand(b, b, -1), xq.unsqueeze(0).expand(b, b, -1))


def pool(tokens):
    """Mean over the token axis, then L2 normalisation."""
    return F.normalize(tokens.mean(dim=-2), dim=-1, eps=1e-12)


def pool_visual(x0, xT):
    return pool(torch.stack([x0, xT], dim=-2))


def pool_queries(xq):
    return pool(xq)


def similarity_matrix(xv, xq, temperature):
    if temperature <= 0:
        raise ValidationError(f"temperature must be positive, got {temperature}", field="temperature")
    s = F.normalize(xv, dim=-1, eps=1e-12) @ F.normalize(xq, dim=-1, eps=1e-12).T / temperature
    if not torch.isfinite(s).all():
        raise NumericError("non-finite similarity")
    return s


def vlc_loss(xv, xq, temperature=0.07, variant="aggregate"):
    """Contrastive loss over a batch of pooled (visual, query) vectors.

    ``aggregate``: -log(sum_j e^{s_jj} / sum_{j,k} e^{s_jk}), the positives summed
    inside the log.  ``infonce``: mean of the per-row cross entropies.
    """
    if xv.shape[0] < 1 or xv.shape != xq.shape:
        raise ShapeError(f"vlc_loss needs matching nonempty batches, got {tuple(xv.shape)} and {tuple(xq.shape)}")
    s = similarity_matrix(xv, xq, temperature)
    if variant == "infonce":
        return F.cross_entropy(s, torch.arange(s.shape[0]))
    if variant != "aggregate":
        raise ValidationError(f"unknown vlc variant {variant!r}", field="variant")
    return torch.logsumexp(s.flatten(), 0) - torch.logsumexp(torch.diagonal(s), 0)


def vlm_loss_from_logits(logits):
    if not torch.isfinite(logits).all():
        raise NumericError("non-finite matching logit")
    target = torch.eye(logits.shape[0], dtype=logits.dtype)
    return F.binary_cross_entropy_with_logits(logits, target, reduction="mean")


def vlm_loss(xv, xq, head: MatchHead):
    """Binary matched/unmatched cross entropy over all B x B pairs, averaged."""
    if xv.shape[0] < 1 or xv.shape != xq.shape:
        raise ShapeError("vlm_loss needs matching nonempty batches")
    return vlm_loss_from_logits(head.pair_logits(xv, xq))


def mim_loss(vlc, vlm):
    return vlc + vlm

"""Closed-set step decoding: learnable queries, knowledge fusion with LM hidden states, description refinement."""
from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn

from .attention import MultiHeadAttention, cross_attention
from .errors import ShapeError, ValidationError


class StepDecoder(nn.Module):
    def __init__(self, horizon, n_steps, d_model=64, d_lm=64, n_heads=4):
        super().__init__()
        self.horizon, self.n_steps = horizon, n_steps
        self.queries = nn.Parameter(torch.randn(horizon, d_model) * 0.02)
        self.step_decoder = MultiHeadAttention(d_model, n_heads)
        self.knowledge_fusion = MultiHeadAttention(d_model, n_heads)
        self.fusion_projection = nn.Linear(d_lm, d_model)
        self.step_refiner = MultiHeadAttention(d_model, n_heads)
        self.classifier = nn.Linear(d_model, n_steps)

    def step_decode(self, context):
        """context: (B, 2+T, d) = [x'_0, x'_T, x^q_1..T] -> (B, T, d)."""
        if context.shape[-2] != 2 + self.horizon:
            raise ShapeError(f"decoder context must have {2 + self.horizon} tokens, got {context.shape[-2]}")
        q = self.queries if context.dim() == 2 else self.queries.expand(context.shape[0], -1, -1)
        return cross_attention(q, context, self.step_decoder)

    def knowledge_fuse(self, r_sd, h):
        if h.shape[-2] != r_sd.shape[-2]:
            raise ShapeError(f"knowledge fusion needs {r_sd.shape[-2]} hidden states, got {h.shape[-2]}")
        return cross_attention(r_sd, self.fusion_projection(h), self.knowledge_fusion)

    def step_refine(self, r_kf, descriptions):
        """descriptions: (N, d) frozen step-description embeddings."""
        if descriptions.shape[0] == 0:
            raise ValidationError("step refinement needs a nonempty vocabulary", field="descriptions")
        context = descriptions if r_kf.dim() == 2 else descriptions.expand(r_kf.shape[0], -1, -1)
        return cross_attention(r_kf, context, self.step_refiner)

    def classify(self, r_sr):
        return self.classifier(r_sr)

    def forward(self, context, descriptions, h=None):
        """Full branch; ``h=None`` skips knowledge fusion."""
        r = self.step_decode(context)
        if h is not None:
            r = self.knowledge_fuse(r, h)
        return self.classify(self.step_refine(r, descriptions))


def sd_loss(logits, gt_steps):
    """Per-position cross entropy, averaged over positions (and batch)."""
    n = logits.shape[-1]
    if gt_steps.numel() and (int(gt_steps.max()) >= n or int(gt_steps.min()) < 0):
        raise ValidationError(f"ground-truth step id out of range [0, {n})", field="gt_steps")
    return F.cross_entropy(logits.reshape(-1, n), gt_steps.reshape(-1))


def total_loss(mim, asc, sd, weights=(1.0, 1.0, 1.0)):
    return weights[0] * mim + weights[1] * asc + weights[2] * sd

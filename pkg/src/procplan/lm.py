"""Small causal language model branch: tokenizer, caption format, LoRA adapters, generation and the captioning loss."""
from __future__ import annotations

import math
import re
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .attention import FeedForward, LayerNorm, MultiHeadAttention, causal_mask
from .errors import ShapeError, ValidationError

PAD, UNK, BOS, EOS, SEP = "<pad>", "<unk>", "<bos>", "<eos>", ";"
_MARKER = re.compile(r"step\s+(\d+)\s*:", re.IGNORECASE)
_TOKEN = re.compile(r"step\s+\d+\s*:|;|[^\s;]+", re.IGNORECASE)


class Tokenizer:
    """Word-level tokenizer; ``step k:`` markers and ``;`` separators are single tokens."""

    def __init__(self, words, max_horizon=4):
        self.max_horizon = max_horizon
        specials = [PAD, UNK, BOS, EOS, SEP] + [self.marker(k) for k in range(1, max_horizon + 1)]
        extra = sorted(set(words) - set(specials))
        self.itos = specials + extra
        self.stoi = {w: i for i, w in enumerate(self.itos)}

    @staticmethod
    def marker(k):
        return f"step {k}:"

    @classmethod
    def from_labels(cls, labels, max_horizon=4, extra_words=()):
        words = {w for label in labels for w in label.split()}
        return cls(words | set(extra_words), max_horizon)

    @classmethod
    def from_itos(cls, itos):
        tok = cls.__new__(cls)
        tok.itos = list(itos)
        tok.stoi = {w: i for i, w in enumerate(tok.itos)}
        tok.max_horizon = sum(1 for w in tok.itos if _MARKER.fullmatch(w))
        return tok

    def __len__(self):
        return len(self.itos)

    pad_id = property(lambda self: self.stoi[PAD])
    unk_id = property(lambda self: self.stoi[UNK])
    bos_id = property(lambda self: self.stoi[BOS])
    eos_id = property(lambda self: self.stoi[EOS])

    def encode(self, text):
        ids = []
        for piece in _TOKEN.findall(text):
            m = _MARKER.fullmatch(piece)
            key = self.marker(int(m.group(1))) if m else piece
            ids.append(self.stoi.get(key, self.unk_id))
        return ids

    def decode(self, ids):
        skip = {self.pad_id, self.bos_id, self.eos_id}
        return " ".join(self.itos[i] for i in ids if i not in skip)


def format_caption(labels, horizon=None):
    if horizon is not None and len(labels) != horizon:
        raise ValidationError(f"expected {horizon} labels, got {len(labels)}", field="labels")
    if not labels or any(not label.strip() for label in labels):
        raise ValidationError("labels must be nonempty", field="labels")
    return " ; ".join(f"step {k}: {label}" for k, label in enumerate(labels, start=1))


@dataclass
class ParsedCaption:
    segments: list[str]
    fallback: bool


def parse_caption(text, horizon) -> ParsedCaption:
    """Split a caption on ``step k:`` markers; missing segments fall back to the whole caption."""
    whole = " ".join(text.replace(";", " ").split())
    found = {}
    markers = list(_MARKER.finditer(text))
    for i, m in enumerate(markers):
        k = int(m.group(1))
        end = markers[i + 1].start() if i + 1 < len(markers) else len(text)
        segment = " ".join(text[m.end():end].replace(";", " ").split())
        if 1 <= k <= horizon and k not in found and segment:
            found[k] = segment
    segments = [found.get(k, whole) for k in range(1, horizon + 1)]
    return ParsedCaption(segments, fallback=len(found) < horizon)


class LoRALinear(nn.Module):
    """Wraps a frozen linear layer with a low-rank update ``(alpha / r) * B @ A``."""

    def __init__(self, base: nn.Linear, r=4, alpha=8.0):
        super().__init__()
        self.base = base
        self.r, self.alpha = r, alpha
        self.lora_A = nn.Parameter(torch.empty(r, base.in_features))
        self.lora_B = nn.Parameter(torch.zeros(base.out_features, r))
        nn.init.kaiming_uniform_(self.lora_A, a=math.sqrt(5))
        self.enabled = True

    in_features = property(lambda self: self.base.in_features)
    out_features = property(lambda self: self.base.out_features)

    @property
    def scale(self):
        return self.alpha / self.r

    def effective_weight(self):
        return lora_apply(self.base.weight, self.lora_A, self.lora_B, self.alpha)

    def forward(self, x):
        out = self.base(x)
        if self.enabled:
            out = out + self.scale * ((x @ self.lora_A.T) @ self.lora_B.T)
        return out


def lora_apply(weight, A, B, alpha):
    if B.shape[0] != weight.shape[0] or A.shape[1] != weight.shape[1] or A.shape[0] != B.shape[1]:
        raise ShapeError(f"adapter shapes A{tuple(A.shape)} B{tuple(B.shape)} do not fit W{tuple(weight.shape)}")
    return weight + (alpha / A.shape[0]) * (B @ A)


class LMBlock(nn.Module):
    def __init__(self, d, n_heads):
        super().__init__()
        self.ln1 = LayerNorm(d)
        self.attn = MultiHeadAttention(d, n_heads)
        self.ln2 = LayerNorm(d)
        self.ff = FeedForward(d)

    def forward(self, x, mask):
        h = self.ln1(x)
        x = x + self.attn(h, h, mask)
        return x + self.ff(self.ln2(x))


class TinyLM(nn.Module):
    def __init__(self, vocab_size, d_model=64, d_lm=64, n_layers=2, n_heads=4, max_len=64,
                 lora_rank=4, lora_alpha=8.0):
        super().__init__()
        self.vocab_size, self.max_len = vocab_size, max_len
        self.tok_emb = nn.Embedding(vocab_size, d_lm)
        nn.init.normal_(self.tok_emb.weight, std=0.02)
        self.pos_emb = nn.Parameter(torch.randn(max_len, d_lm) * 0.02)
        self.blocks = nn.ModuleList(LMBlock(d_lm, n_heads) for _ in range(n_layers))
        self.ln_f = LayerNorm(d_lm)
        self.head = nn.Linear(d_lm, vocab_size)
        self.prefix_projection = nn.Linear(d_model, d_lm)
        for block in self.blocks:
            block.attn.q_proj = LoRALinear(block.attn.q_proj, lora_rank, lora_alpha)
            block.attn.v_proj = LoRALinear(block.attn.v_proj, lora_rank, lora_alpha)

    def lora_layers(self):
        return [m for m in self.modules() if isinstance(m, LoRALinear)]

    def set_lora_enabled(self, enabled: bool):
        for layer in self.lora_layers():
            layer.enabled = enabled

    def embed(self, prefix, token_ids):
        """prefix: (B, P, d_model) or None; token_ids: (B, L) -> (B, P+L, d_lm)."""
        parts = []
        if prefix is not None:
            parts.append(self.prefix_projection(prefix))
        if token_ids is not None and token_ids.shape[-1]:
            parts.append(self.tok_emb(token_ids))
        x = torch.cat(parts, dim=1)
        if x.shape[1] > self.max_len:
            raise ShapeError(f"sequence of length {x.shape[1]} exceeds max_len={self.max_len}")
        return x + self.pos_emb[: x.shape[1]]

    def hidden(self, x):
        mask = causal_mask(x.shape[1])
        for block in self.blocks:
            x = block(x, mask)
        return self.ln_f(x)

    def forward(self, prefix, token_ids):
        """Returns (hidden states, logits) over the full prefix + token sequence."""
        h = self.hidden(self.embed(prefix, token_ids))
        return h, self.head(h)

    def encode(self, prefix, n_visual=2):
        """Hidden states at the fused-step prefix positions."""
        h = self.hidden(self.embed(prefix, None))
        return h[:, n_visual:]

    @torch.no_grad()
    def generate(self, prefix, bos_id, eos_id, max_len):
        """Greedy decoding from BOS; returns one list of token ids per batch row (EOS excluded)."""
        b = prefix.shape[0]
        tokens = torch.full((b, 1), bos_id, dtype=torch.long)
        done = torch.zeros(b, dtype=torch.bool)
        out = [[] for _ in range(b)]
        for _ in range(max_len):
            _, logits = self(prefix, tokens)
            nxt = logits[:, -1].argmax(dim=-1)
            for i in range(b):
                if not done[i]:
                    if nxt[i].item() == eos_id:
                        done[i] = True
                    else:
                        out[i].append(int(nxt[i]))
            if done.all():
                break
            tokens = torch.cat([tokens, nxt.unsqueeze(1)], dim=1)
        return out


def pad_batch(sequences, pad_id):
    n = max((len(s) for s in sequences), default=0)
    out = torch.full((len(sequences), n), pad_id, dtype=torch.long)
    for i, s in enumerate(sequences):
        out[i, : len(s)] = torch.tensor(s, dtype=torch.long)
    return out


def teacher_forcing_batch(captions_ids, tokenizer):
    """Inputs ``[BOS, c_1..c_n]`` and targets ``[c_1..c_n, EOS]``, padded."""
    if any(len(c) == 0 for c in captions_ids):
        raise ValidationError("captioning target must be nonempty", field="target")
    inputs = pad_batch([[tokenizer.bos_id] + list(c) for c in captions_ids], tokenizer.pad_id)
    targets = pad_batch([list(c) + [tokenizer.eos_id] for c in captions_ids], tokenizer.pad_id)
    return inputs, targets


def asc_loss_from_logits(logits, targets, pad_id):
    """Mean token cross entropy over non-pad caption positions."""
    return F.cross_entropy(logits.reshape(-1, logits.shape[-1]), targets.reshape(-1), ignore_index=pad_id)


def asc_loss(lm: TinyLM, prefix, captions_ids, tokenizer, return_hidden=False):
    """Teacher-forced captioning loss; prefix positions are excluded from the loss."""
    inputs, targets = teacher_forcing_batch(captions_ids, tokenizer)
    hidden, logits = lm(prefix, inputs)
    p = prefix.shape[1]
    loss = asc_loss_from_logits(logits[:, p:], targets, tokenizer.pad_id)
    return (loss, hidden[:, :p]) if return_hidden else loss


def _sample_sequences(gen, n_labels, horizon, batch_size, procedures):
    if not procedures:
        return torch.randint(n_labels, (batch_size, horizon), generator=gen).tolist()
    rows = []
    for _ in range(batch_size):
        proc = procedures[int(torch.randint(len(procedures), (1,), generator=gen))]
        start = int(torch.randint(len(proc) - horizon + 1, (1,), generator=gen))
        rows.append(list(proc[start:start + horizon]))
    return rows


def pretrain_language_model(lm: TinyLM, tokenizer, labels, horizon, procedures=None, steps=300, batch_size=32,
                            lr=3e-3, seed=0):
    """Warm the base LM on formatted step captions before it is frozen.

    Stands in for a pretrained language model.  With ``procedures`` (ordered
    step-id lists) the text is contiguous windows of those procedures, so the
    base carries procedural knowledge; otherwise random label sequences teach
    only the caption format and label phrases.  Prefix vectors are random.
    Returns the per-step loss curve.
    """
    procedures = [list(p) for p in (procedures or []) if len(p) >= horizon]
    gen = torch.Generator().manual_seed(seed)
    params = [p for n, p in lm.named_parameters() if "lora_" not in n and not n.startswith("prefix_projection")]
    opt = torch.optim.AdamW(params, lr=lr, weight_decay=0.0)
    was_enabled = [layer.enabled for layer in lm.lora_layers()]
    lm.set_lora_enabled(False)
    d_model = lm.prefix_projection.in_features
    dtype = lm.pos_emb.dtype
    curve = []
    for _ in range(steps):
        picks = _sample_sequences(gen, len(labels), horizon, batch_size, procedures)
        captions = [tokenizer.encode(format_caption([labels[i] for i in row])) for row in picks]
        prefix = torch.randn(batch_size, 2 + horizon, d_model, generator=gen, dtype=dtype)
        loss = asc_loss(lm, prefix, captions, tokenizer)
        opt.zero_grad()
        loss.backward()
        opt.step()
        curve.append(loss.item())
    for layer, flag in zip(lm.lora_layers(), was_enabled):
        layer.enabled = flag
    lm.zero_grad(set_to_none=True)
    return curve

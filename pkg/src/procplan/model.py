"""The full planning model and its named parameter groups."""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np
import torch
from torch import nn

from .data import StepVocabulary, word_bank
from .decoder import StepDecoder, sd_loss, total_loss
from .encoders import TextEncoder, VisualEncoder
from .errors import ValidationError
from .lm import Tokenizer, TinyLM, asc_loss, format_caption, pretrain_language_model
from .mim import MatchHead, QFormer, StateInteraction, mim_loss, pool_queries, pool_visual, vlc_loss, vlm_loss

GROUPS = (
    "visual_backbone", "visual_projection", "text_encoder", "state_interaction", "step_queries", "qformer",
    "match_head", "lm_base", "lm_prefix_projection", "lora_adapters", "decoder_queries", "decoder_blocks",
    "fusion_projection", "refiner_blocks", "classifier",
)

_PREFIXES = (
    ("visual.backbone.", "visual_backbone"),
    ("visual.projection.", "visual_projection"),
    ("text_encoder.", "text_encoder"),
    ("state_interaction.", "state_interaction"),
    ("qformer.queries", "step_queries"),
    ("qformer.", "qformer"),
    ("match_head.", "match_head"),
    ("lm.prefix_projection.", "lm_prefix_projection"),
    ("lm.", "lm_base"),
    ("decoder.queries", "decoder_queries"),
    ("decoder.step_decoder.", "decoder_blocks"),
    ("decoder.knowledge_fusion.", "decoder_blocks"),
    ("decoder.fusion_projection.", "fusion_projection"),
    ("decoder.step_refiner.", "refiner_blocks"),
    ("decoder.classifier.", "classifier"),
)


def group_of(name: str) -> str:
    if "lora_A" in name or "lora_B" in name:
        return "lora_adapters"
    for prefix, group in _PREFIXES:
        if name.startswith(prefix):
            return group
    raise KeyError(f"parameter {name!r} belongs to no group")


@dataclass(frozen=True)
class ModelConfig:
    horizon: int = 3
    d_raw: int = 64
    d_back: int = 64
    d_model: int = 64
    n_heads: int = 4
    qformer_blocks: int = 2
    d_lm: int = 64
    lm_layers: int = 2
    lm_heads: int = 4
    lm_max_len: int = 64
    max_horizon: int = 4
    lora_rank: int = 4
    lora_alpha: float = 8.0
    temperature: float = 0.07
    vlc_variant: str = "aggregate"
    text_buckets: int = 4096
    tokenizer_word_bank: bool = True
    lm_pretrain_steps: int = 300
    lm_pretrain_lr: float = 3e-3
    use_mim: bool = True
    use_llm: bool = True
    seed: int = 0
    dtype: str = "float64"

    @classmethod
    def from_dict(cls, data: dict) -> ModelConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValidationError(f"unknown model field(s): {sorted(unknown)}", field=sorted(unknown)[0])
        return cls(**data)

    def validate(self):
        if self.d_model % self.n_heads or self.d_lm % self.lm_heads:
            raise ValidationError("model widths must be divisible by head counts", field="n_heads")
        if self.horizon > self.max_horizon:
            raise ValidationError("horizon exceeds max_horizon", field="horizon")
        if self.temperature <= 0:
            raise ValidationError("temperature must be positive", field="temperature")
        if self.dtype not in ("float32", "float64"):
            raise ValidationError(f"unsupported dtype {self.dtype!r}", field="dtype")
        return self

    @property
    def torch_dtype(self):
        return getattr(torch, self.dtype)


@dataclass
class Batch:
    start: torch.Tensor
    goal: torch.Tensor
    gt: torch.Tensor
    captions: list


class PlanningModel(nn.Module):
    def __init__(self, config: ModelConfig, vocabulary: StepVocabulary, tokenizer: Tokenizer):
        super().__init__()
        self.config = config.validate()
        self.vocabulary = vocabulary
        self.tokenizer = tokenizer
        c = config
        self.visual = VisualEncoder(c.d_raw, c.d_back, c.d_model)
        self.text_encoder = TextEncoder(c.d_model, n_buckets=c.text_buckets)
        self.state_interaction = StateInteraction(c.d_model, c.n_heads)
        self.qformer = QFormer(c.horizon, c.d_model, c.n_heads, c.qformer_blocks)
        self.match_head = MatchHead(c.d_model)
        self.lm = TinyLM(len(tokenizer), c.d_model, c.d_lm, c.lm_layers, c.lm_heads, c.lm_max_len,
                         c.lora_rank, c.lora_alpha)
        self.decoder = StepDecoder(c.horizon, len(vocabulary), c.d_model, c.d_lm, c.n_heads)
        self.register_buffer("descriptions", torch.zeros(len(vocabulary), c.d_model), persistent=False)
        self._caption_cache = {}

    @property
    def horizon(self):
        return self.config.horizon

    def refresh_descriptions(self):
        self.descriptions = self.text_encoder(self.vocabulary.descriptions).to(self.descriptions.dtype)
        return self

    # ------------------------------------------------------------------ groups

    def parameter_groups(self) -> dict[str, list[tuple[str, nn.Parameter]]]:
        groups = {g: [] for g in GROUPS}
        for name, p in self.named_parameters():
            groups[group_of(name)].append((name, p))
        return groups

    def set_trainable(self, trainable_groups):
        for group, params in self.parameter_groups().items():
            for _, p in params:
                p.requires_grad_(group in trainable_groups)

    # ------------------------------------------------------------------ batches

    def caption_ids(self, step_ids):
        key = tuple(step_ids)
        if key not in self._caption_cache:
            text = format_caption([self.vocabulary.steps[i].label for i in key])
            self._caption_cache[key] = self.tokenizer.encode(text)
        return self._caption_cache[key]

    def make_batch(self, samples) -> Batch:
        dtype = self.descriptions.dtype
        start = torch.tensor(np.array([s.start_features for s in samples]), dtype=dtype)
        goal = torch.tensor(np.array([s.goal_features for s in samples]), dtype=dtype)
        gt = torch.tensor([list(s.gt_steps) for s in samples], dtype=torch.long)
        captions = [self.caption_ids(s.gt_steps) if s.gt_steps else [] for s in samples]  # unlabelled at inference
        return Batch(start, goal, gt, captions)

    # ------------------------------------------------------------------ forward pieces

    def visual_states(self, start, goal):
        return self.state_interaction(self.visual(start), self.visual(goal))

    def fused_steps(self, x0v, xTv, text=None):
        if not self.config.use_mim:
            return self.qformer.queries.expand(x0v.shape[0], -1, -1)
        return self.qformer(torch.stack([x0v, xTv], dim=1), text)

    def prefix(self, x0v, xTv, xq):
        return torch.cat([x0v.unsqueeze(1), xTv.unsqueeze(1), xq], dim=1)

    def mim_terms(self, x0v, xTv, gt):
        xq_text = self.qformer(torch.stack([x0v, xTv], dim=1), self.descriptions[gt])
        xv, xq = pool_visual(x0v, xTv), pool_queries(xq_text)
        vlc = vlc_loss(xv, xq, self.config.temperature, self.config.vlc_variant)
        vlm = vlm_loss(xv, xq, self.match_head)
        return vlc, vlm

    def losses(self, batch: Batch, stage: int = 2, weights=(1.0, 1.0, 1.0)):
        """Loss terms for one batch. Stage 1 evaluates only the MIM objective."""
        x0v, xTv = self.visual_states(batch.start, batch.goal)
        zero = x0v.new_zeros(())
        out = {"vlc": zero, "vlm": zero, "mim": zero, "asc": zero, "sd": zero}
        if self.config.use_mim:
            out["vlc"], out["vlm"] = self.mim_terms(x0v, xTv, batch.gt)
            out["mim"] = mim_loss(out["vlc"], out["vlm"])
        if stage == 1:
            out["total"] = out["mim"]
            return out
        prefix = self.prefix(x0v, xTv, self.fused_steps(x0v, xTv))
        h = None
        if self.config.use_llm:
            out["asc"], hidden = asc_loss(self.lm, prefix, batch.captions, self.tokenizer, return_hidden=True)
            h = hidden[:, 2:]
        logits = self.decoder(prefix, self.descriptions, h)
        out["sd"] = sd_loss(logits, batch.gt)
        out["total"] = total_loss(out["mim"], out["asc"], out["sd"], weights)
        return out

    # ------------------------------------------------------------------ inference

    @torch.no_grad()
    def plan_prefix(self, start, goal):
        x0v, xTv = self.visual_states(start, goal)
        return self.prefix(x0v, xTv, self.fused_steps(x0v, xTv))

    @torch.no_grad()
    def closed_set_logits(self, start, goal):
        prefix = self.plan_prefix(start, goal)
        h = self.lm.encode(prefix) if self.config.use_llm else None
        return self.decoder(prefix, self.descriptions, h)

    @torch.no_grad()
    def generate_captions(self, start, goal, max_len=None):
        prefix = self.plan_prefix(start, goal)
        max_len = self.config.lm_max_len - prefix.shape[1] - 1 if max_len is None else max_len
        ids = self.lm.generate(prefix, self.tokenizer.bos_id, self.tokenizer.eos_id, max_len)
        return [self.tokenizer.decode(seq) for seq in ids]


def build_tokenizer(config: ModelConfig, vocabulary: StepVocabulary) -> Tokenizer:
    extra = word_bank() if config.tokenizer_word_bank else ()
    return Tokenizer.from_labels(vocabulary.labels, config.max_horizon, extra)


def build_model(config: ModelConfig, vocabulary: StepVocabulary, tokenizer: Tokenizer | None = None,
                pretrain: bool = True, procedures=None) -> PlanningModel:
    """Seeded construction; the base LM is warmed on caption text before being frozen.

    ``procedures`` (ordered step-id lists, e.g. task canonical sequences) form the
    warm-up corpus when given.
    """
    tokenizer = tokenizer or build_tokenizer(config, vocabulary)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.seed)
        model = PlanningModel(config, vocabulary, tokenizer).to(config.torch_dtype)
    model.refresh_descriptions()
    if pretrain and config.lm_pretrain_steps > 0:
        pretrain_language_model(model.lm, tokenizer, vocabulary.labels, config.horizon, procedures,
                                steps=config.lm_pretrain_steps, lr=config.lm_pretrain_lr, seed=config.seed)
    model.set_trainable(())
    return model


def config_dict(config) -> dict:
    return asdict(config)

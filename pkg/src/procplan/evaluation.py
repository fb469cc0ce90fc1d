"""Closed-set and open-vocabulary inference, planning metrics and evaluation reports."""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .data import Dataset, StepVocabulary, dataset_fingerprint
from .errors import ValidationError
from .lm import parse_caption

BATCH = 256


# ---------------------------------------------------------------- metrics

def _as_rows(preds, gts):
    preds, gts = [tuple(p) for p in preds], [tuple(g) for g in gts]
    if len(preds) != len(gts):
        raise ValidationError(f"{len(preds)} predictions for {len(gts)} ground-truth sequences")
    for p, g in zip(preds, gts):
        if len(p) != len(g):
            raise ValidationError("prediction and ground truth differ in length")
    return preds, gts


def metric_sr(preds, gts) -> float:
    """Fraction of sequences that match exactly."""
    preds, gts = _as_rows(preds, gts)
    return float(np.mean([p == g for p, g in zip(preds, gts)])) if preds else 0.0


def metric_macc(preds, gts) -> float:
    """Mean position-wise accuracy."""
    preds, gts = _as_rows(preds, gts)
    if not preds:
        return 0.0
    return float(np.mean([np.mean([a == b for a, b in zip(p, g)]) for p, g in zip(preds, gts)]))


def metric_miou(preds, gts) -> float:
    """Mean over samples of the IoU between predicted and true step sets (order ignored)."""
    preds, gts = _as_rows(preds, gts)
    if not preds:
        return 0.0
    return float(np.mean([len(set(p) & set(g)) / len(set(p) | set(g)) for p, g in zip(preds, gts)]))


REPORT_KEYS = ("sr", "macc", "miou", "horizon", "n_samples", "mode", "seed", "dataset_fingerprint")


@dataclass
class MetricsReport:
    sr: float
    macc: float
    miou: float
    horizon: int
    n_samples: int
    mode: str
    seed: int
    dataset_fingerprint: str

    def to_json(self) -> str:
        return json.dumps({k: getattr(self, k) for k in REPORT_KEYS}, separators=(", ", ": "))

    @classmethod
    def from_json(cls, line: str) -> MetricsReport:
        data = json.loads(line)
        if set(data) != set(REPORT_KEYS):
            raise ValidationError(f"report keys must be exactly {REPORT_KEYS}")
        return cls(**data)


def make_report(preds, gts, horizon, mode, seed=0, fingerprint="") -> MetricsReport:
    return MetricsReport(metric_sr(preds, gts), metric_macc(preds, gts), metric_miou(preds, gts),
                         horizon, len(gts), mode, seed, fingerprint)


# ---------------------------------------------------------------- inference

def _tensors(model, samples):
    batch = model.make_batch(samples)
    return batch.start, batch.goal


def infer_closed_set_batch(model, samples) -> list[tuple[int, ...]]:
    out = []
    for i in range(0, len(samples), BATCH):
        start, goal = _tensors(model, samples[i:i + BATCH])
        logits = model.closed_set_logits(start, goal)
        out.extend(tuple(int(x) for x in row) for row in logits.argmax(dim=-1))  # argmax picks lowest index on ties
    return out


def infer_closed_set(model, sample) -> tuple[int, ...]:
    return infer_closed_set_batch(model, [sample])[0]


@dataclass
class OpenVocabPlan:
    caption: str
    segments: list
    labels: list
    indices: list
    fallback: bool


def retrieve(text_encoder, segments, candidate_labels) -> list[int]:
    """Index of the most cosine-similar candidate for each segment; ties go to the lowest index.

    A segment with no tokens (e.g. an empty generated caption) scores zero
    against every candidate and so resolves to index 0.
    """
    if not candidate_labels:
        raise ValidationError("candidate label set is empty", field="candidate_labels")
    with torch.no_grad():
        cand = F.normalize(text_encoder(list(candidate_labels)), dim=-1)
        seg = torch.zeros(len(segments), cand.shape[-1], dtype=cand.dtype)
        keep = [i for i, s in enumerate(segments) if text_encoder.has_tokens(s)]
        if keep:
            seg[keep] = F.normalize(text_encoder([segments[i] for i in keep]), dim=-1)
    sims = (seg @ cand.T).numpy()
    return [int(np.argmax(row)) for row in sims]


def plan_from_caption(text_encoder, caption, horizon, candidate_labels) -> OpenVocabPlan:
    parsed = parse_caption(caption, horizon)
    idx = retrieve(text_encoder, parsed.segments, candidate_labels)
    return OpenVocabPlan(caption, parsed.segments, [candidate_labels[i] for i in idx], idx, parsed.fallback)


def infer_open_vocab_batch(model, samples, candidate_labels) -> list[OpenVocabPlan]:
    if not candidate_labels:
        raise ValidationError("candidate label set is empty", field="candidate_labels")
    plans = []
    for i in range(0, len(samples), BATCH):
        start, goal = _tensors(model, samples[i:i + BATCH])
        for caption in model.generate_captions(start, goal):
            plans.append(plan_from_caption(model.text_encoder, caption, model.horizon, list(candidate_labels)))
    return plans


def infer_open_vocab(model, sample, candidate_labels) -> OpenVocabPlan:
    return infer_open_vocab_batch(model, [sample], candidate_labels)[0]


# ---------------------------------------------------------------- evaluation

def evaluate(model, dataset: Dataset, vocabulary: StepVocabulary, mode="closed_set", seed=0,
             candidate_vocabulary: StepVocabulary | None = None) -> MetricsReport:
    """Run one inference path over a dataset and aggregate SR / mAcc / mIoU."""
    samples = list(dataset.samples)
    gts = [s.gt_steps for s in samples]
    if mode == "closed_set":
        preds = infer_closed_set_batch(model, samples)
    elif mode == "open_vocab":
        candidates = candidate_vocabulary or vocabulary
        preds = [tuple(p.indices) for p in infer_open_vocab_batch(model, samples, candidates.labels)]
    else:
        raise ValidationError(f"unknown evaluation mode {mode!r}", field="mode")
    return make_report(preds, gts, dataset.horizon, mode, seed, dataset_fingerprint(dataset, vocabulary))


def cross_dataset_eval(model, dataset: Dataset, vocabulary: StepVocabulary, seed=0) -> MetricsReport:
    """Evaluate a model on a dataset with a different step vocabulary, through label retrieval only."""
    if len(vocabulary) == 0:
        raise ValidationError("target vocabulary is empty", field="vocabulary")
    return evaluate(model, dataset, vocabulary, mode="open_vocab", seed=seed)


def chance_sr(n_labels: int, horizon: int) -> float:
    return 1.0 / n_labels ** horizon

"""Test-side oracles: central finite differences and micro fixtures."""
import math

import torch

from procplan.data import ActionStep, StepVocabulary
from procplan.model import ModelConfig, build_model

MICRO_LABELS = ["cut onion", "peel apple", "wash the egg", "fry rice"]

MICRO_CONFIG = ModelConfig(
    horizon=2, d_raw=6, d_back=8, d_model=8, n_heads=2, qformer_blocks=1, d_lm=8, lm_layers=1, lm_heads=2,
    lm_max_len=24, max_horizon=2, lora_rank=2, lora_alpha=4.0, temperature=0.5, text_buckets=64,
    tokenizer_word_bank=False, lm_pretrain_steps=0, seed=3,
)


def micro_vocabulary():
    return StepVocabulary([ActionStep(i, lab, f"To {lab}: perform the action carefully.")
                           for i, lab in enumerate(MICRO_LABELS)])


def micro_model(**overrides):
    import dataclasses
    return build_model(dataclasses.replace(MICRO_CONFIG, **overrides), micro_vocabulary())


def central_difference(fn, tensor, step=1e-5):
    """d fn / d tensor by central differences; ``fn`` returns a dict or a scalar."""
    flat = tensor.data.view(-1)
    grads = None
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + step
        plus = fn()
        flat[i] = orig - step
        minus = fn()
        flat[i] = orig
        if not isinstance(plus, dict):
            plus, minus = {"value": plus}, {"value": minus}
        if grads is None:
            grads = {k: torch.zeros(flat.numel(), dtype=torch.float64) for k in plus}
        for k in plus:
            grads[k][i] = (float(plus[k]) - float(minus[k])) / (2 * step)
    return {k: g.view(tensor.shape) for k, g in grads.items()}


def relative_error(analytic, numeric, floor=1e-6):
    """Norm-relative error; gradients that are zero up to ``floor`` compare absolutely."""
    a, n = analytic.double().flatten(), numeric.double().flatten()
    return (a - n).norm().item() / max(a.norm().item(), n.norm().item(), floor)


def bce(logit, label):
    p = 1.0 / (1.0 + math.exp(-logit))
    return -(label * math.log(p) + (1 - label) * math.log(1 - p))


SMALL_CONFIG = ModelConfig(
    horizon=3, d_raw=16, d_back=16, d_model=16, n_heads=2, qformer_blocks=1, d_lm=16, lm_layers=1, lm_heads=2,
    lm_max_len=32, max_horizon=3, text_buckets=512, tokenizer_word_bank=False, lm_pretrain_steps=20,
)


def small_world(seed=0, noise=0.0, samples_per_task=16):
    from procplan.data import GeneratorSpec, generate_synthetic_dataset
    return generate_synthetic_dataset(GeneratorSpec(n_tasks=4, n_steps=12, horizon=3, samples_per_task=samples_per_task,
                                                    d_raw=16, noise_sigma=noise, seed=seed))


def small_model(vocab, dataset=None, **overrides):
    import dataclasses
    procedures = [t.canonical_sequence for t in dataset.tasks] if dataset is not None else None
    return build_model(dataclasses.replace(SMALL_CONFIG, **overrides), vocab, procedures=procedures)

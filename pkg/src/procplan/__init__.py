"""Procedure planning from start/goal visual states.

A query transformer fuses start/goal embeddings with step-description
knowledge, a small LoRA-tuned causal LM writes free-form plan captions, and a
cross-attention decoder enhanced by the LM hidden states predicts closed-set
step ids.
"""
from .config import RunConfig, load_config
from .data import (
    ActionStep, Dataset, GeneratorSpec, PlanningSample, StepVocabulary, TaskSpec, generate_synthetic_dataset,
    load_dataset, save_dataset, split_dataset,
)
from .evaluation import MetricsReport, evaluate, infer_closed_set, infer_open_vocab
from .model import ModelConfig, PlanningModel, build_model
from .training import FreezeManifest, StageConfig, load_checkpoint, run_stage1, run_stage2, save_checkpoint

__version__ = "0.1.0"

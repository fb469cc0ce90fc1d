"""End-to-end helpers: data from a run config, staged training with checkpoints and loss logs."""
from __future__ import annotations

import dataclasses
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

from .config import RunConfig
from .data import Dataset, StepVocabulary, generate_synthetic_dataset, load_dataset, split_dataset
from .errors import ValidationError
from .model import PlanningModel, build_model
from .training import (
    Checkpoint, FreezeManifest, load_checkpoint, model_from_checkpoint, run_stage1, run_stage2, save_checkpoint,
)

logger = logging.getLogger(__name__)


def load_or_generate(cfg: RunConfig) -> tuple[Dataset, StepVocabulary]:
    if cfg.data.path:
        return load_dataset(cfg.data.path)
    return generate_synthetic_dataset(cfg.data.generator)


def splits(cfg: RunConfig, dataset: Dataset) -> dict[str, Dataset]:
    train, val, test = split_dataset(dataset, cfg.data.split, cfg.data.split_seed, cfg.data.by_task)
    return {"train": train, "val": val, "test": test, "all": dataset}


def manifest_for(mode: str) -> FreezeManifest:
    return FreezeManifest().without("lora_adapters") if mode == "frozen-llm" else FreezeManifest()


def format_log_record(record: dict) -> str:
    return json.dumps(record, separators=(", ", ": "))


@dataclass
class TrainResult:
    model: PlanningModel
    checkpoints: dict = field(default_factory=dict)  # stage -> Checkpoint
    log: list = field(default_factory=list)


def train(cfg: RunConfig, train_data: Dataset, vocabulary: StepVocabulary, stages=(1, 2), mode=None,
          resume: Checkpoint | None = None, out_dir=None) -> TrainResult:
    """Run the configured training schedule.

    ``progressive``: stage 1 (MIM only) then stage 2 (full objective).
    ``one-stage``: stage 2 only, from initialisation.
    ``frozen-llm``: progressive with the adapters frozen as well.
    ``resume`` starts stage 2 from a saved stage-1 checkpoint.
    """
    mode = mode or cfg.train.mode
    manifest = manifest_for(mode)
    fingerprint = cfg.fingerprint()
    if resume is not None:
        model = model_from_checkpoint(resume)
        stages = tuple(s for s in stages if s == 2)
    else:
        procedures = [t.canonical_sequence for t in train_data.tasks]
        config = dataclasses.replace(cfg.model_config(), horizon=train_data.horizon, d_raw=train_data.d_raw)
        model = build_model(config, vocabulary, procedures=procedures)
    if mode == "one-stage":
        stages = tuple(s for s in stages if s == 2)
    result = TrainResult(model)
    out = Path(out_dir) if out_dir else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
        log_path = out / "loss_log.jsonl"
        log_path.write_text("", encoding="utf-8")

    def emit(record):
        result.log.append(record)
        if out:
            with log_path.open("a", encoding="utf-8") as fh:
                fh.write(format_log_record(record) + "\n")

    if 1 in stages:
        ckpt = run_stage1(model, train_data, cfg.stage_config(1), manifest, emit, fingerprint)
        result.checkpoints[1] = ckpt
        if out:
            save_checkpoint(ckpt, out / "stage1.ckpt")
    if 2 in stages:
        offset = result.log[-1]["step"] if result.log else (resume.step if resume is not None else 0)
        ckpt = run_stage2(model, train_data, cfg.stage_config(2), None, manifest, emit, offset, fingerprint)
        result.checkpoints[2] = ckpt
        if out:
            save_checkpoint(ckpt, out / "stage2.ckpt")
    if not result.checkpoints:
        raise ValidationError("no training stage selected", field="stages")
    return result


def load_model(path) -> PlanningModel:
    return model_from_checkpoint(load_checkpoint(path))

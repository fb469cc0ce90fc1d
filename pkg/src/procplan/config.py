"""Declarative run configuration.

A config file is YAML (or JSON) with the sections ``data``, ``model``, ``train``,
``eval`` and ``io`` plus a top-level ``seed``.  Every key has a default and
unknown keys are rejected.  The top-level seed overrides ``model.seed`` and the
per-stage seeds; ``PROCPLAN_SEED`` and ``PROCPLAN_OUTPUT_DIR`` override the
seed and ``io.output_dir``.

Example::

    seed: 0
    data:
      generator: {n_tasks: 10, n_steps: 30, horizon: 3, samples_per_task: 100, noise_sigma: 0.0}
      split: [0.8, 0.1, 0.1]
    train:
      mode: progressive          # progressive | one-stage | frozen-llm
      stage1: {epochs: 5}
      stage2: {epochs: 20, learning_rates: {lora_adapters: 0.001}}
    eval: {modes: [closed_set, open_vocab]}
    io: {output_dir: runs/demo}
"""
from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field, fields
from pathlib import Path

import yaml

from .data import GeneratorSpec
from .errors import ParseError, ValidationError
from .model import ModelConfig
from .training import StageConfig, config_fingerprint

TRAIN_MODES = ("progressive", "one-stage", "frozen-llm")
EVAL_MODES = ("closed_set", "open_vocab")


def _check_keys(cls, data, section):
    if not isinstance(data, dict):
        raise ValidationError(f"section {section!r} must be a mapping", field=section)
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ValidationError(f"unknown key(s) in {section!r}: {unknown}", field=f"{section}.{unknown[0]}")


@dataclass
class DataConfig:
    path: str | None = None
    generator: GeneratorSpec = field(default_factory=GeneratorSpec)
    split: tuple = (0.8, 0.1, 0.1)
    split_seed: int = 0
    by_task: bool = False


@dataclass
class TrainConfig:
    mode: str = "progressive"
    stage1: StageConfig = field(default_factory=lambda: StageConfig(stage=1, epochs=5))
    stage2: StageConfig = field(default_factory=lambda: StageConfig(stage=2, epochs=20))


@dataclass
class EvalConfig:
    modes: tuple = ("closed_set",)
    split: str = "test"


@dataclass
class IOConfig:
    output_dir: str = "runs/default"


@dataclass
class RunConfig:
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    io: IOConfig = field(default_factory=IOConfig)

    # ------------------------------------------------------------ construction

    @classmethod
    def from_dict(cls, raw: dict | None) -> RunConfig:
        raw = dict(raw or {})
        _check_keys(cls, raw, "config")
        cfg = cls()
        if "seed" in raw:
            cfg.seed = int(raw["seed"])
        if "data" in raw:
            d = dict(raw["data"])
            _check_keys(DataConfig, d, "data")
            gen = GeneratorSpec.from_dict(d.pop("generator", {}) or {})
            if "split" in d:
                d["split"] = tuple(d["split"])
            cfg.data = DataConfig(generator=gen, **d)
        if "model" in raw:
            _check_keys(ModelConfig, raw["model"], "model")
            cfg.model = ModelConfig.from_dict(raw["model"])
        if "train" in raw:
            t = dict(raw["train"])
            _check_keys(TrainConfig, t, "train")
            stages = {}
            for key, stage in (("stage1", 1), ("stage2", 2)):
                s = dict(t.pop(key, {}) or {})
                _check_keys(StageConfig, s, f"train.{key}")
                s.setdefault("stage", stage)
                s.setdefault("epochs", 5 if stage == 1 else 20)
                for name in ("betas", "loss_weights"):
                    if name in s:
                        s[name] = tuple(s[name])
                stages[key] = StageConfig(**s)
            cfg.train = TrainConfig(**t, **stages)
        if "eval" in raw:
            e = dict(raw["eval"])
            _check_keys(EvalConfig, e, "eval")
            if "modes" in e:
                e["modes"] = tuple(e["modes"])
            cfg.eval = EvalConfig(**e)
        if "io" in raw:
            _check_keys(IOConfig, raw["io"], "io")
            cfg.io = IOConfig(**raw["io"])
        return cfg.validate()

    def validate(self) -> RunConfig:
        self.data.generator.validate()
        self.model.validate()
        if self.train.mode not in TRAIN_MODES:
            raise ValidationError(f"train.mode must be one of {TRAIN_MODES}", field="train.mode")
        self.train.stage1.validate()
        self.train.stage2.validate()
        if self.train.stage1.stage != 1 or self.train.stage2.stage != 2:
            raise ValidationError("train.stage1/stage2 must carry stage 1/2", field="train.stage1.stage")
        for mode in self.eval.modes:
            if mode not in EVAL_MODES:
                raise ValidationError(f"unknown eval mode {mode!r}", field="eval.modes")
        if self.eval.split not in ("train", "val", "test", "all"):
            raise ValidationError("eval.split must be train, val, test or all", field="eval.split")
        return self

    def with_env(self, environ=None) -> RunConfig:
        environ = os.environ if environ is None else environ
        cfg = self
        if environ.get("PROCPLAN_SEED"):
            cfg = dataclasses.replace(cfg, seed=int(environ["PROCPLAN_SEED"]))
        if environ.get("PROCPLAN_OUTPUT_DIR"):
            cfg = dataclasses.replace(cfg, io=IOConfig(environ["PROCPLAN_OUTPUT_DIR"]))
        return cfg

    # ------------------------------------------------------------ derived

    def to_dict(self) -> dict:
        return json.loads(json.dumps(dataclasses.asdict(self)))

    def canonical_text(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def fingerprint(self) -> str:
        return config_fingerprint(self.to_dict())

    def model_config(self) -> ModelConfig:
        return dataclasses.replace(self.model, seed=self.seed, horizon=self.data.generator.horizon)

    def stage_config(self, stage: int) -> StageConfig:
        base = self.train.stage1 if stage == 1 else self.train.stage2
        return dataclasses.replace(base, seed=self.seed)


def load_config(path=None, environ=None) -> RunConfig:
    if path is None:
        return RunConfig().with_env(environ)
    try:
        raw = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise ParseError(f"{path}: {exc}") from None
    return RunConfig.from_dict(raw).with_env(environ)


def dump_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=True), encoding="utf-8")

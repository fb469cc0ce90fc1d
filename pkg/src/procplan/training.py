"""Two-stage progressive training, freeze enforcement and checkpoint archives."""
from __future__ import annotations

import hashlib
import json
import logging
import math
import zipfile
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from .data import ActionStep, StepVocabulary
from .errors import FreezeViolation, IntegrityError, NumericError, ParseError, TrainingError, ValidationError
from .lm import Tokenizer
from .model import GROUPS, ModelConfig, PlanningModel, build_model

logger = logging.getLogger(__name__)

ALWAYS_FROZEN = frozenset({"visual_backbone", "text_encoder", "lm_base"})
STAGE1_TRAINABLE = frozenset({"visual_projection", "state_interaction", "step_queries", "qformer", "match_head"})
STAGE2_TRAINABLE = STAGE1_TRAINABLE | {
    "lora_adapters", "lm_prefix_projection", "decoder_queries", "decoder_blocks", "fusion_projection",
    "refiner_blocks", "classifier",
}
QFORMER_GROUPS = frozenset({"qformer", "step_queries"})
STAGE2_SLOW_GROUPS = STAGE2_TRAINABLE - STAGE1_TRAINABLE


@dataclass(frozen=True)
class FreezeManifest:
    stage1: frozenset = STAGE1_TRAINABLE
    stage2: frozenset = STAGE2_TRAINABLE

    def trainable(self, stage: int) -> frozenset:
        if stage not in (1, 2):
            raise ValidationError(f"stage must be 1 or 2, got {stage}", field="stage")
        return self.stage1 if stage == 1 else self.stage2

    def frozen(self, stage: int) -> frozenset:
        return frozenset(GROUPS) - self.trainable(stage)

    def without(self, *groups) -> FreezeManifest:
        return FreezeManifest(self.stage1 - set(groups), self.stage2 - set(groups))


def default_learning_rates(stage: int) -> dict[str, float]:
    rates = {g: (1e-4 if g in QFORMER_GROUPS else 1e-3) for g in STAGE1_TRAINABLE}
    if stage == 2:
        rates.update({g: 1e-4 for g in STAGE2_SLOW_GROUPS})
    return rates


@dataclass
class StageConfig:
    stage: int = 1
    epochs: int = 5
    batch_size: int = 16
    learning_rates: dict = field(default_factory=dict)
    weight_decay: float = 0.01
    betas: tuple = (0.9, 0.999)
    grad_clip: float = 1.0
    loss_weights: tuple = (1.0, 1.0, 1.0)
    seed: int = 0

    def validate(self):
        if self.stage not in (1, 2):
            raise ValidationError(f"stage must be 1 or 2, got {self.stage}", field="stage")
        if self.epochs < 0:
            raise ValidationError("epochs must be >= 0", field="epochs")
        if self.batch_size < 1:
            raise ValidationError("batch_size must be positive", field="batch_size")
        unknown = set(self.learning_rates) - set(GROUPS)
        if unknown:
            raise ValidationError(f"learning rate given for unknown group(s) {sorted(unknown)}",
                                  field="learning_rates")
        return self

    def rates(self) -> dict[str, float]:
        rates = default_learning_rates(self.stage)
        rates.update(self.learning_rates)
        return rates


# ---------------------------------------------------------------- hashing and checkpoints

def _le_bytes(array: np.ndarray) -> bytes:
    return np.ascontiguousarray(array, dtype=array.dtype.newbyteorder("<")).tobytes()


def _group_hash(items) -> str:
    h = hashlib.sha256()
    for name, array in sorted(items):
        h.update(name.encode("utf-8"))
        h.update(repr(tuple(array.shape)).encode("utf-8"))
        h.update(_le_bytes(array))
    return h.hexdigest()


def group_hashes(model: PlanningModel) -> dict[str, str]:
    return {g: _group_hash((n, p.detach().cpu().numpy()) for n, p in params)
            for g, params in model.parameter_groups().items()}


def config_fingerprint(obj) -> str:
    text = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


@dataclass
class Checkpoint:
    state: dict  # parameter name -> ndarray
    groups: dict  # group -> list of parameter names
    hashes: dict  # group -> hex digest
    stage: int
    epoch: int
    model_config: dict
    tokenizer: list
    vocabulary: list
    config_fingerprint: str = ""
    rng_state: str = ""  # JSON key of the data-order stream: epoch e shuffles with default_rng([seed, stage, e])
    step: int = 0  # optimizer steps taken so far, across stages

    def group_state(self, group):
        return {n: self.state[n] for n in self.groups[group]}


def snapshot(model: PlanningModel, stage=0, epoch=0, fingerprint="", step=0, rng_state="") -> Checkpoint:
    state, groups = {}, {}
    for g, params in model.parameter_groups().items():
        groups[g] = [n for n, _ in params]
        for n, p in params:
            state[n] = p.detach().cpu().numpy().copy()
    hashes = {g: _group_hash((n, state[n]) for n in names) for g, names in groups.items()}
    return Checkpoint(state, groups, hashes, stage, epoch, asdict(model.config), list(model.tokenizer.itos),
                      [asdict(s) for s in model.vocabulary.steps], fingerprint or
                      config_fingerprint(asdict(model.config)), rng_state, step)


def load_state(model: PlanningModel, ckpt: Checkpoint):
    params = dict(model.named_parameters())
    missing = set(params) - set(ckpt.state)
    if missing:
        raise IntegrityError(f"checkpoint lacks parameters {sorted(missing)[:5]}")
    with torch.no_grad():
        for name, p in params.items():
            value = torch.from_numpy(np.asarray(ckpt.state[name])).to(p.dtype)
            if value.shape != p.shape:
                raise IntegrityError(f"shape mismatch for {name}: {tuple(value.shape)} vs {tuple(p.shape)}")
            p.copy_(value)
    return model


def model_from_checkpoint(ckpt: Checkpoint) -> PlanningModel:
    config = ModelConfig.from_dict(ckpt.model_config)
    vocab = StepVocabulary([ActionStep(**s) for s in ckpt.vocabulary])
    model = build_model(config, vocab, Tokenizer.from_itos(ckpt.tokenizer), pretrain=False)
    return load_state(model, ckpt).refresh_descriptions()


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    manifest = {
        "format": 1, "stage": ckpt.stage, "epoch": ckpt.epoch, "step": ckpt.step,
        "config_fingerprint": ckpt.config_fingerprint,
        "model_config": ckpt.model_config, "tokenizer": ckpt.tokenizer, "vocabulary": ckpt.vocabulary,
        "rng_state": ckpt.rng_state,
        "groups": {g: {"hash": ckpt.hashes[g],
                       "tensors": {n: {"shape": list(ckpt.state[n].shape), "dtype": ckpt.state[n].dtype.str,
                                       "file": f"tensors/{n}.bin"} for n in names}}
                   for g, names in ckpt.groups.items()},
    }
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        zf.writestr(zipfile.ZipInfo("manifest.json", (1980, 1, 1, 0, 0, 0)),
                    json.dumps(manifest, sort_keys=True, indent=1))
        for names in ckpt.groups.values():
            for n in names:
                zf.writestr(zipfile.ZipInfo(f"tensors/{n}.bin", (1980, 1, 1, 0, 0, 0)), _le_bytes(ckpt.state[n]))


def read_manifest(path) -> dict:
    try:
        with zipfile.ZipFile(path) as zf:
            return json.loads(zf.read("manifest.json"))
    except (zipfile.BadZipFile, KeyError, json.JSONDecodeError) as exc:
        raise ParseError(f"{path}: not a checkpoint archive ({exc})") from None


def load_checkpoint(path, verify=True) -> Checkpoint:
    manifest = read_manifest(path)
    state, groups, hashes = {}, {}, {}
    with zipfile.ZipFile(path) as zf:
        for g, info in manifest["groups"].items():
            groups[g] = list(info["tensors"])
            hashes[g] = info["hash"]
            for n, t in info["tensors"].items():
                dtype = np.dtype(t["dtype"])
                state[n] = np.frombuffer(zf.read(t["file"]), dtype=dtype).reshape(t["shape"]).astype(
                    dtype.newbyteorder("="))
    if verify:
        for g, names in groups.items():
            actual = _group_hash((n, state[n]) for n in names)
            if actual != hashes[g]:
                raise IntegrityError(f"hash mismatch in parameter group {g!r}: archive is corrupted or tampered")
    return Checkpoint(state, groups, hashes, manifest["stage"], manifest["epoch"], manifest["model_config"],
                      manifest["tokenizer"], manifest["vocabulary"], manifest["config_fingerprint"],
                      manifest["rng_state"], manifest.get("step", 0))


@dataclass
class FreezeReport:
    changed: list
    violations: list

    @property
    def ok(self):
        return not self.violations


def verify_freeze(before: Checkpoint, after: Checkpoint, manifest: FreezeManifest = FreezeManifest(),
                  stage: int | None = None) -> FreezeReport:
    """Groups whose hash changed between two checkpoints; changes to groups frozen in ``stage`` are violations."""
    stage = after.stage if stage is None else stage
    changed = [g for g in GROUPS if before.hashes.get(g) != after.hashes.get(g)]
    allowed = manifest.trainable(stage) if stage in (1, 2) else frozenset()
    return FreezeReport(changed, [g for g in changed if g not in allowed])


# ---------------------------------------------------------------- training loop

def _optimizer(model, trainable, cfg: StageConfig):
    rates = cfg.rates()
    param_groups = []
    for g, params in model.parameter_groups().items():
        if g in trainable and params:
            param_groups.append({"params": [p for _, p in params], "lr": rates.get(g, 1e-3), "name": g})
    return torch.optim.AdamW(param_groups, betas=tuple(cfg.betas), weight_decay=cfg.weight_decay)


def _emit(log, record):
    if log is None:
        return
    if callable(log):
        log(record)
    else:
        log.append(record)


def run_stage(model: PlanningModel, train_data, cfg: StageConfig, manifest: FreezeManifest = FreezeManifest(),
              log=None, step_offset=0, fingerprint="") -> Checkpoint:
    """Optimise one stage; stage 1 minimises the MIM loss, stage 2 the summed objective."""
    cfg.validate()
    samples = list(train_data)
    if not samples:
        raise ValidationError("training data is empty", field="train_data")
    trainable = manifest.trainable(cfg.stage)
    if not model.config.use_mim:
        trainable = trainable - {"match_head"}
    before = snapshot(model, stage=cfg.stage)
    model.set_trainable(trainable)
    optimizer = _optimizer(model, trainable, cfg) if cfg.epochs else None
    params = [p for group in optimizer.param_groups for p in group["params"]] if optimizer else []
    curve = []
    step = step_offset
    model.train()
    for epoch in range(cfg.epochs):
        order = np.random.default_rng([cfg.seed, cfg.stage, epoch]).permutation(len(samples))
        for start in range(0, len(order), cfg.batch_size):
            batch_id = (epoch, start // cfg.batch_size)
            batch = model.make_batch([samples[i] for i in order[start:start + cfg.batch_size]])
            try:
                terms = model.losses(batch, stage=cfg.stage, weights=cfg.loss_weights)
            except NumericError as exc:
                raise TrainingError(f"stage {cfg.stage}, epoch {epoch}, batch {batch_id[1]}: {exc}",
                                    batch_id=batch_id, loss_curve=curve) from exc
            loss = terms["total"]
            curve.append(loss.item())
            if not math.isfinite(curve[-1]):
                raise TrainingError(f"non-finite loss at stage {cfg.stage}, epoch {epoch}, batch {batch_id[1]}",
                                    batch_id=batch_id, loss_curve=curve)
            if not loss.requires_grad:
                raise TrainingError(f"stage {cfg.stage} objective has no trainable inputs")
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            if cfg.grad_clip:
                torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip)
            optimizer.step()
            step += 1
            _emit(log, {"stage": cfg.stage, "step": step, "L_MIM": terms["mim"].item(), "L_ASC": terms["asc"].item(),
                        "L_SD": terms["sd"].item(), "total": curve[-1]})
    model.eval()
    model.set_trainable(())
    rng_state = json.dumps({"seed": cfg.seed, "stage": cfg.stage, "next_epoch": cfg.epochs})
    after = snapshot(model, stage=cfg.stage, epoch=cfg.epochs, fingerprint=fingerprint, step=step, rng_state=rng_state)
    report = verify_freeze(before, after, manifest, cfg.stage)
    if report.violations:
        raise FreezeViolation(f"frozen group(s) changed during stage {cfg.stage}: {report.violations}",
                              loss_curve=curve)
    return after


def run_stage1(model, train_data, cfg: StageConfig, manifest: FreezeManifest = FreezeManifest(), log=None,
               fingerprint="") -> Checkpoint:
    if cfg.stage != 1:
        raise ValidationError("run_stage1 needs a stage-1 config", field="stage")
    return run_stage(model, train_data, cfg, manifest, log, fingerprint=fingerprint)


def run_stage2(model, train_data, cfg: StageConfig, stage1_ckpt: Checkpoint | None = None,
               manifest: FreezeManifest = FreezeManifest(), log=None, step_offset=0, fingerprint="") -> Checkpoint:
    if cfg.stage != 2:
        raise ValidationError("run_stage2 needs a stage-2 config", field="stage")
    if stage1_ckpt is not None:
        load_state(model, stage1_ckpt)
    return run_stage(model, train_data, cfg, manifest, log, step_offset, fingerprint)

import json
import zipfile

import numpy as np
import pytest
import torch

from helpers import small_model, small_world
from procplan.errors import FreezeViolation, IntegrityError, ParseError, TrainingError, ValidationError
from procplan.model import GROUPS
from procplan.training import (
    ALWAYS_FROZEN, FreezeManifest, StageConfig, group_hashes, load_checkpoint, model_from_checkpoint,
    run_stage1, run_stage2, save_checkpoint, snapshot, verify_freeze,
)


@pytest.fixture(scope="module")
def world():
    return small_world()


def probe(model, dataset, n=6):
    batch = model.make_batch(dataset.samples[:n])
    return model.closed_set_logits(batch.start, batch.goal), model.lm.encode(model.plan_prefix(batch.start, batch.goal))


# ---------------------------------------------------------------- manifest

def test_manifest_sets():
    m = FreezeManifest()
    assert m.trainable(1) == {"visual_projection", "state_interaction", "step_queries", "qformer", "match_head"}
    assert m.trainable(2) == m.trainable(1) | {"lora_adapters", "lm_prefix_projection", "decoder_queries",
                                               "decoder_blocks", "fusion_projection", "refiner_blocks", "classifier"}
    for stage in (1, 2):
        assert ALWAYS_FROZEN <= m.frozen(stage)
        assert m.trainable(stage) | m.frozen(stage) == set(GROUPS)
    assert "lora_adapters" not in m.without("lora_adapters").trainable(2)
    with pytest.raises(ValidationError):
        m.trainable(3)


def test_every_parameter_has_a_group(world):
    model = small_model(world[1])
    groups = model.parameter_groups()
    assert set(groups) == set(GROUPS)
    assert sum(len(v) for v in groups.values()) == len(list(model.parameters()))
    assert all(groups[g] for g in GROUPS)


def test_stage_config_validation():
    with pytest.raises(ValidationError):
        StageConfig(stage=3).validate()
    with pytest.raises(ValidationError):
        StageConfig(epochs=-1).validate()
    with pytest.raises(ValidationError):
        StageConfig(learning_rates={"nonsense": 1.0}).validate()
    rates = StageConfig(stage=1).rates()
    assert rates["qformer"] == rates["step_queries"] == 1e-4
    assert rates["visual_projection"] == rates["match_head"] == 1e-3
    assert StageConfig(stage=2).rates()["lora_adapters"] == 1e-4


# ---------------------------------------------------------------- stage 1

def test_zero_epochs_is_identity(world):
    dataset, vocab = world
    model = small_model(vocab)
    before = group_hashes(model)
    ckpt = run_stage1(model, dataset, StageConfig(stage=1, epochs=0))
    assert ckpt.hashes == before


def test_stage1_freeze_contract(world):
    dataset, vocab = world
    model = small_model(vocab, dataset)
    before = group_hashes(model)
    log = []
    ckpt = run_stage1(model, dataset, StageConfig(stage=1, epochs=2), log=log)
    changed = {g for g in GROUPS if before[g] != ckpt.hashes[g]}
    assert changed == FreezeManifest().trainable(1)
    assert all(r["L_ASC"] == 0 and r["L_SD"] == 0 for r in log)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_stage1_reduces_mim(world, seed):
    dataset, vocab = world
    model = small_model(vocab, seed=seed)
    log = []
    run_stage1(model, dataset, StageConfig(stage=1, epochs=50, batch_size=16, seed=seed), log=log)
    assert len(log) == 200
    assert log[-1]["L_MIM"] < log[0]["L_MIM"]


# ---------------------------------------------------------------- stage 2

@pytest.fixture(scope="module")
def staged(world):
    dataset, vocab = world
    model = small_model(vocab, dataset)
    init = snapshot(model)
    s1 = run_stage1(model, dataset, StageConfig(stage=1, epochs=3))
    llm_after_s1 = probe(model, dataset)[1]
    model.lm.set_lora_enabled(False)
    llm_base_only = probe(model, dataset)[1]
    model.lm.set_lora_enabled(True)
    log = []
    s2 = run_stage2(model, dataset, StageConfig(stage=2, epochs=50, seed=0), s1, log=log)
    return dict(model=model, init=init, s1=s1, s2=s2, log=log, llm_after_s1=llm_after_s1,
                llm_base_only=llm_base_only)


def test_checkpoint_records_data_order_stream(staged):
    assert json.loads(staged["s2"].rng_state) == {"seed": 0, "stage": 2, "next_epoch": 50}
    assert json.loads(staged["s1"].rng_state)["stage"] == 1


def test_stage2_freeze_contract(staged):
    init, s1, s2 = staged["init"], staged["s1"], staged["s2"]
    for g in ALWAYS_FROZEN:
        assert init.hashes[g] == s1.hashes[g] == s2.hashes[g]
    assert s1.hashes["lora_adapters"] == init.hashes["lora_adapters"]
    assert s2.hashes["lora_adapters"] != s1.hashes["lora_adapters"]
    assert verify_freeze(s1, s2).violations == []


def test_lora_at_stage2_start_equals_base(staged):
    assert torch.equal(staged["llm_after_s1"], staged["llm_base_only"])


def test_stage2_reduces_total(staged):
    log = staged["log"]
    assert len(log) == 200
    assert np.mean([r["total"] for r in log[-10:]]) < np.mean([r["total"] for r in log[:10]])
    assert all(r["stage"] == 2 for r in log)
    assert [r["step"] for r in log] == list(range(1, 201))


def test_stage_config_mismatch(world):
    dataset, vocab = world
    model = small_model(vocab)
    with pytest.raises(ValidationError):
        run_stage1(model, dataset, StageConfig(stage=2))
    with pytest.raises(ValidationError):
        run_stage2(model, dataset, StageConfig(stage=1))
    with pytest.raises(ValidationError):
        run_stage1(model, dataset.subset([]), StageConfig(stage=1))


def test_non_finite_aborts_with_diagnostics(world):
    dataset, vocab = world
    model = small_model(vocab)
    with torch.no_grad():
        model.visual.projection.weight.fill_(float("nan"))
    with pytest.raises(TrainingError) as err:
        run_stage1(model, dataset, StageConfig(stage=1, epochs=1))
    assert err.value.batch_id == (0, 0)
    assert err.value.loss_curve == []


def test_freeze_violation_aborts(world, monkeypatch):
    import procplan.training as training
    dataset, vocab = world
    model = small_model(vocab)
    monkeypatch.setattr(training, "verify_freeze",
                        lambda *a, **k: training.FreezeReport(["lm_base"], ["lm_base"]))
    with pytest.raises(FreezeViolation):
        run_stage1(model, dataset, StageConfig(stage=1, epochs=1))


def test_without_mim_skips_match_head(world):
    dataset, vocab = world
    model = small_model(vocab, use_mim=False)
    before = group_hashes(model)
    ckpt = run_stage2(model, dataset, StageConfig(stage=2, epochs=1))
    assert ckpt.hashes["match_head"] == before["match_head"]
    assert ckpt.hashes["step_queries"] != before["step_queries"]


def test_training_is_deterministic(world):
    dataset, vocab = world
    runs = []
    for _ in range(2):
        model = small_model(vocab, dataset)
        log = []
        s1 = run_stage1(model, dataset, StageConfig(stage=1, epochs=1), log=log)
        s2 = run_stage2(model, dataset, StageConfig(stage=2, epochs=1), s1, log=log, step_offset=len(log))
        runs.append((log, s2.hashes))
    assert runs[0] == runs[1]


# ---------------------------------------------------------------- verify_freeze

def test_verify_freeze_cases(world):
    model = small_model(world[1])
    a = snapshot(model, stage=1)
    assert verify_freeze(a, a).changed == [] and verify_freeze(a, a).ok
    with torch.no_grad():
        model.qformer.queries.add_(1.0)
    b = snapshot(model, stage=1)
    report = verify_freeze(a, b)
    assert report.changed == ["step_queries"] and report.violations == []
    with torch.no_grad():
        model.lm.head.bias.add_(1.0)
    c = snapshot(model, stage=1)
    report = verify_freeze(a, c)
    assert report.changed == ["step_queries", "lm_base"] and report.violations == ["lm_base"]
    with torch.no_grad():
        model.decoder.classifier.bias.add_(1.0)
    d = snapshot(model, stage=1)
    assert verify_freeze(c, d, stage=1).violations == ["classifier"]
    assert verify_freeze(c, d, stage=2).violations == []


# ---------------------------------------------------------------- checkpoints

def test_checkpoint_round_trip(staged, world, tmp_path):
    model, ckpt = staged["model"], staged["s2"]
    path = tmp_path / "m.ckpt"
    save_checkpoint(ckpt, path)
    loaded = load_checkpoint(path)
    assert loaded.hashes == ckpt.hashes and loaded.stage == 2 and loaded.epoch == 50
    assert loaded.tokenizer == ckpt.tokenizer and loaded.vocabulary == ckpt.vocabulary
    for name, value in ckpt.state.items():
        assert np.array_equal(loaded.state[name], value)
    restored = model_from_checkpoint(loaded)
    for a, b in zip(probe(model, world[0]), probe(restored, world[0])):
        assert torch.max(torch.abs(a - b)).item() <= 1e-12


def test_checkpoint_bytes_deterministic(staged, tmp_path):
    save_checkpoint(staged["s2"], tmp_path / "a.ckpt")
    save_checkpoint(staged["s2"], tmp_path / "b.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def _rewrite(src, dst, name, mutate):
    with zipfile.ZipFile(src) as zin, zipfile.ZipFile(dst, "w") as zout:
        for info in zin.infolist():
            data = zin.read(info.filename)
            zout.writestr(info, mutate(data) if info.filename == name else data)


def test_tampered_checkpoint(staged, tmp_path):
    path, bad = tmp_path / "m.ckpt", tmp_path / "bad.ckpt"
    save_checkpoint(staged["s2"], path)
    _rewrite(path, bad, "tensors/decoder.classifier.bias.bin", lambda d: bytes([d[0] ^ 1]) + d[1:])
    with pytest.raises(IntegrityError, match="classifier"):
        load_checkpoint(bad)
    load_checkpoint(bad, verify=False)


def test_not_an_archive(tmp_path):
    path = tmp_path / "junk.ckpt"
    path.write_text("hello")
    with pytest.raises(ParseError):
        load_checkpoint(path)


def test_manifest_records_little_endian_arrays(staged, tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(staged["s2"], path)
    import json
    with zipfile.ZipFile(path) as zf:
        manifest = json.loads(zf.read("manifest.json"))
        info = manifest["groups"]["classifier"]["tensors"]["decoder.classifier.bias"]
        raw = np.frombuffer(zf.read(info["file"]), dtype="<f8")
    assert info["dtype"] == "<f8"
    assert np.array_equal(raw, staged["s2"].state["decoder.classifier.bias"])
    assert set(manifest["groups"]) == set(GROUPS)

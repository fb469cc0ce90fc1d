"""Which parameter groups each stage is allowed to touch, checked through content hashes."""
from procplan.data import GeneratorSpec, generate_synthetic_dataset
from procplan.model import GROUPS, ModelConfig, build_model
from procplan.training import FreezeManifest, StageConfig, run_stage1, run_stage2, snapshot, verify_freeze

dataset, vocab = generate_synthetic_dataset(GeneratorSpec(n_tasks=3, n_steps=8, samples_per_task=10, d_raw=16))
model = build_model(ModelConfig(d_raw=16, d_back=16, d_model=16, d_lm=16, lm_pretrain_steps=20), vocab)

manifest = FreezeManifest()
for stage in (1, 2):
    print(f"stage {stage} trains:", sorted(manifest.trainable(stage)))

init = snapshot(model)
s1 = run_stage1(model, dataset, StageConfig(stage=1, epochs=1))
s2 = run_stage2(model, dataset, StageConfig(stage=2, epochs=1), s1)
print(f"{'group':22s} {'init':>10s} {'stage 1':>10s} {'stage 2':>10s}")
for g in GROUPS:
    print(f"{g:22s} {init.hashes[g][:10]} {s1.hashes[g][:10]} {s2.hashes[g][:10]}")
print("stage 1 violations:", verify_freeze(init, s1, manifest, 1).violations)
print("stage 2 violations:", verify_freeze(s1, s2, manifest, 2).violations)

# adapters start at B = 0, so before stage 2 the adapted model equals the base model
fresh = build_model(ModelConfig(d_raw=16, d_back=16, d_model=16, d_lm=16, lm_pretrain_steps=20), vocab)
batch = fresh.make_batch(dataset.samples[:4])
prefix = fresh.plan_prefix(batch.start, batch.goal)
a = fresh.lm.encode(prefix)
fresh.lm.set_lora_enabled(False)
print("adapter-free difference:", (a - fresh.lm.encode(prefix)).abs().max().item())

"""Generate a synthetic procedure world, look at a few samples, split it and round-trip it to disk."""
import tempfile
from pathlib import Path

from procplan.data import GeneratorSpec, generate_synthetic_dataset, load_dataset, save_dataset, split_dataset

spec = GeneratorSpec(n_tasks=4, n_steps=12, horizon=3, samples_per_task=25, d_raw=16, noise_sigma=0.1, seed=0)
dataset, vocab = generate_synthetic_dataset(spec)
print(f"{len(dataset)} samples, {len(vocab)} steps, horizon {dataset.horizon}, d_raw {dataset.d_raw}")

# each task is an ordered procedure; a sample is a contiguous window of it
for task in dataset.tasks[:2]:
    print(f"task {task.task_id}:", " -> ".join(vocab.labels[i] for i in task.canonical_sequence[:5]), "...")

s = dataset.samples[0]
print("sample 0 gt:", [vocab.labels[i] for i in s.gt_steps])
print("  start features", [round(x, 2) for x in s.start_features[:4]], "...")
print("  description of first step:", vocab.steps[s.gt_steps[0]].description)

train, val, test = split_dataset(dataset, (0.8, 0.1, 0.1), seed=0)
print("split sizes", len(train), len(val), len(test))

# a paraphrased vocabulary over the same latent world
_, other = generate_synthetic_dataset(GeneratorSpec(n_tasks=4, n_steps=12, d_raw=16, seed=0, label_variant=1))
print("variant labels:", other.labels[:4])

with tempfile.TemporaryDirectory() as tmp:
    path = Path(tmp) / "world.jsonl"
    save_dataset(dataset, vocab, path)
    loaded, loaded_vocab = load_dataset(path)
    print("round trip identical:", loaded == dataset and loaded_vocab == vocab)

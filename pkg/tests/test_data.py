import dataclasses
import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from procplan.data import (
    GeneratorSpec, dataset_fingerprint, dumps_dataset, generate_synthetic_dataset, load_dataset, loads_dataset,
    save_dataset, split_dataset,
)
from procplan.errors import IntegrityError, ParseError, ValidationError


@pytest.fixture(scope="module")
def small():
    return generate_synthetic_dataset(GeneratorSpec(n_tasks=2, n_steps=6, horizon=3, samples_per_task=5))


@pytest.fixture(scope="module")
def default():
    return generate_synthetic_dataset(GeneratorSpec())


def test_structure(small):
    dataset, vocab = small
    assert len(dataset) == 10
    assert len(vocab) == 6
    for s in dataset:
        assert len(s.gt_steps) == 3 == s.horizon
        assert all(0 <= i < 6 for i in s.gt_steps)
        assert len(s.start_features) == len(s.goal_features) == 64
    assert [s.id for s in vocab.steps] == list(range(6))
    assert all(s.label and s.description for s in vocab.steps)


def test_labels_are_multi_token(default):
    _, vocab = default
    assert all(2 <= len(lab.split()) <= 3 for lab in vocab.labels)
    assert len(set(vocab.labels)) == len(vocab)


def test_windows_are_contiguous(default):
    dataset, _ = default
    tasks = {t.task_id: t.canonical_sequence for t in dataset.tasks}
    assert all(len(seq) >= 4 for seq in tasks.values())
    for s in dataset:
        seq = tasks[s.task_id]
        assert any(seq[i:i + 3] == s.gt_steps for i in range(len(seq) - 2))


def test_noiseless_features_depend_only_on_window(default):
    dataset, _ = default
    seen = {}
    for s in dataset:
        key = (s.task_id, s.gt_steps)
        if key in seen:
            assert seen[key] == (s.start_features, s.goal_features)
        seen[key] = (s.start_features, s.goal_features)
    # distinct windows never collide
    feats = list(seen.values())
    assert len(set(feats)) == len(feats)


def test_noise_perturbs_features():
    spec = GeneratorSpec(n_tasks=2, n_steps=6, samples_per_task=20, noise_sigma=0.5)
    dataset, _ = generate_synthetic_dataset(spec)
    clean, _ = generate_synthetic_dataset(dataclasses.replace(spec, noise_sigma=0.0))
    diff = np.array(dataset.features()[0]) - np.array(clean.features()[0])
    assert abs(diff.std() - 0.5) < 0.05


def test_generation_is_deterministic():
    spec = GeneratorSpec(n_tasks=3, n_steps=8, samples_per_task=7, noise_sigma=0.3, seed=11)
    assert dumps_dataset(*generate_synthetic_dataset(spec)) == dumps_dataset(*generate_synthetic_dataset(spec))
    other = generate_synthetic_dataset(dataclasses.replace(spec, seed=12))
    assert dumps_dataset(*other) != dumps_dataset(*generate_synthetic_dataset(spec))


@pytest.mark.parametrize("field,value", [
    ("n_tasks", 0), ("n_steps", 2), ("horizon", 0), ("samples_per_task", -1), ("d_raw", 0),
    ("noise_sigma", -0.1), ("noise_sigma", float("nan")),
])
def test_invalid_spec_names_field(field, value):
    with pytest.raises(ValidationError) as err:
        generate_synthetic_dataset(GeneratorSpec(**{field: value}))
    assert err.value.field == field
    assert field in str(err.value)


def test_unknown_generator_key():
    with pytest.raises(ValidationError):
        GeneratorSpec.from_dict({"n_task": 3})


def test_label_variant_relabels_same_world():
    spec = GeneratorSpec(n_tasks=3, n_steps=12, samples_per_task=10, seed=5)
    a, va = generate_synthetic_dataset(spec)
    b, vb = generate_synthetic_dataset(dataclasses.replace(spec, label_variant=1))
    assert set(va.labels).isdisjoint(vb.labels)
    for sa, sb in zip(a, b):
        assert sa.start_features == sb.start_features
        # same latent step, different id and surface form sharing verb and object
        for ia, ib in zip(sa.gt_steps, sb.gt_steps):
            wa, wb = va.labels[ia].split(), vb.labels[ib].split()
            assert (wa[0], wa[-1]) == (wb[0], wb[-2])


# ---------------------------------------------------------------- file I/O

def test_round_trip(tmp_path, small):
    dataset, vocab = small
    path = tmp_path / "d.jsonl"
    save_dataset(dataset, vocab, path)
    loaded, lvocab = load_dataset(path)
    assert loaded == dataset
    assert lvocab == vocab
    assert dumps_dataset(loaded, lvocab) == path.read_text()


def test_header_is_first_record(small):
    first = json.loads(dumps_dataset(*small).splitlines()[0])
    assert first == {"version": 1, "N": 6, "horizon": 3, "d_raw": 64}


def test_unknown_step_id_names_sample(small):
    lines = dumps_dataset(*small).splitlines()
    rec = json.loads(lines[-1])
    rec["gt_steps"][1] = 6
    lines[-1] = json.dumps(rec)
    with pytest.raises(IntegrityError, match=f"sample {rec['sample_id']}"):
        loads_dataset("\n".join(lines))


def test_empty_file(tmp_path):
    path = tmp_path / "empty.jsonl"
    path.write_text("")
    with pytest.raises(IntegrityError, match="empty vocabulary"):
        load_dataset(path)


def test_malformed_line_reports_number(small):
    lines = dumps_dataset(*small).splitlines()
    lines[4] = "{not json"
    with pytest.raises(ParseError) as err:
        loads_dataset("\n".join(lines))
    assert err.value.line == 5
    assert "line 5" in str(err.value)


def test_wrong_horizon_rejected(small):
    lines = dumps_dataset(*small).splitlines()
    rec = json.loads(lines[-1])
    rec["gt_steps"] = rec["gt_steps"][:2]
    lines[-1] = json.dumps(rec)
    with pytest.raises(IntegrityError):
        loads_dataset("\n".join(lines))


def test_fingerprint_stable(small):
    assert dataset_fingerprint(*small) == dataset_fingerprint(*small)
    assert len(dataset_fingerprint(*small)) == 16


# ---------------------------------------------------------------- splits

@pytest.fixture(scope="module")
def hundred():
    return generate_synthetic_dataset(GeneratorSpec(n_tasks=10, n_steps=12, samples_per_task=10))[0]


def test_split_sizes(hundred):
    assert [len(p) for p in split_dataset(hundred, (0.8, 0.1, 0.1), seed=0)] == [80, 10, 10]


def test_split_deterministic(hundred):
    a = split_dataset(hundred, seed=3)
    b = split_dataset(hundred, seed=3)
    assert [p.samples for p in a] == [p.samples for p in b]
    c = split_dataset(hundred, seed=4)
    assert [p.samples for p in a] != [p.samples for p in c]


def test_split_by_task(hundred):
    parts = split_dataset(hundred, seed=0, by_task=True)
    ids = [{s.task_id for s in p} for p in parts]
    assert not (ids[0] & ids[1] or ids[0] & ids[2] or ids[1] & ids[2])
    assert sum(len(p) for p in parts) == 100


@pytest.mark.parametrize("ratios", [(0.8, 0.1, 0.2), (0.5, 0.5), (1.0, 0.0, 0.0), (0.8, 0.1, 0.1 + 2e-9)])
def test_split_rejects_bad_ratios(hundred, ratios):
    with pytest.raises(ValidationError):
        split_dataset(hundred, ratios)


@settings(max_examples=25, deadline=None)
@given(st.floats(0.05, 0.9), st.floats(0.05, 0.9), st.integers(0, 1000), st.booleans())
def test_split_is_partition(hundred, a, b, seed, by_task):
    if a + b >= 0.99:
        b = (0.99 - a) / 2
    ratios = (a, b, 1.0 - a - b)
    parts = split_dataset(hundred, ratios, seed=seed, by_task=by_task)
    ids = [s.sample_id for p in parts for s in p]
    assert sorted(ids) == sorted(s.sample_id for s in hundred)

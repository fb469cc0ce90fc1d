"""Domain types, the synthetic planning-data generator and dataset file I/O.

A dataset file is line-delimited JSON: one header record, one record per
action step, one per task, then one per sample.
"""
from __future__ import annotations

import hashlib
import io
import json
import math
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .errors import IntegrityError, ParseError, ValidationError

FORMAT_VERSION = 1

VERBS = (
    "peel", "cut", "pour", "stir", "add", "mix", "whisk", "boil", "fry",
    "wash", "chop", "slice", "grate", "spread", "fold", "press", "remove",
    "place", "season", "drain", "heat", "roll", "squeeze", "rinse",
)
OBJECTS = (
    "garlic", "onion", "tomato", "egg", "flour", "butter", "milk", "sugar",
    "water", "oil", "dough", "pepper", "salt", "lemon", "cheese", "bread",
    "rice", "pasta", "carrot", "potato", "sauce", "batter", "cream", "meat",
    "fish", "lettuce", "mushroom", "apple", "bean", "tire", "screw", "wheel",
    "jack", "paint", "brush", "board", "nail", "shelf", "glue", "paper",
)
ADVERBS = ("carefully", "gently", "quickly", "slowly", "firmly", "evenly")


def word_bank():
    """Every word a generated label can contain, in a fixed order."""
    return list(VERBS) + ["the"] + list(OBJECTS) + list(ADVERBS)


@dataclass(frozen=True)
class ActionStep:
    id: int
    label: str
    description: str


@dataclass(frozen=True)
class TaskSpec:
    task_id: int
    canonical_sequence: tuple[int, ...]


@dataclass(frozen=True)
class PlanningSample:
    sample_id: int
    task_id: int
    start_features: tuple[float, ...]
    goal_features: tuple[float, ...]
    gt_steps: tuple[int, ...]

    @property
    def horizon(self) -> int:
        return len(self.gt_steps)


@dataclass
class StepVocabulary:
    steps: list[ActionStep]

    def __post_init__(self):
        if not self.steps:
            raise IntegrityError("empty vocabulary")
        for i, step in enumerate(self.steps):
            if step.id != i:
                raise IntegrityError(f"step ids must be dense and ordered; got id {step.id} at position {i}")
            if not step.label.strip():
                raise IntegrityError(f"step {i} has an empty label")
            if not step.description.strip():
                raise IntegrityError(f"step {i} has an empty description")

    def __len__(self):
        return len(self.steps)

    @property
    def labels(self) -> list[str]:
        return [s.label for s in self.steps]

    @property
    def descriptions(self) -> list[str]:
        return [s.description for s in self.steps]

    def index_of(self, label: str) -> int:
        for step in self.steps:
            if step.label == label:
                return step.id
        raise KeyError(label)


@dataclass
class Dataset:
    samples: list[PlanningSample]
    horizon: int
    d_raw: int
    tasks: list[TaskSpec] = field(default_factory=list)

    def __len__(self):
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def subset(self, samples) -> Dataset:
        return Dataset(list(samples), self.horizon, self.d_raw, list(self.tasks))

    def features(self):
        """(start, goal, gt) as float64 / int64 arrays."""
        start = np.array([s.start_features for s in self.samples], dtype=np.float64).reshape(-1, self.d_raw)
        goal = np.array([s.goal_features for s in self.samples], dtype=np.float64).reshape(-1, self.d_raw)
        gt = np.array([s.gt_steps for s in self.samples], dtype=np.int64).reshape(-1, self.horizon)
        return start, goal, gt


@dataclass(frozen=True)
class GeneratorSpec:
    n_tasks: int = 10
    n_steps: int = 30
    horizon: int = 3
    samples_per_task: int = 100
    d_raw: int = 64
    noise_sigma: float = 0.0
    seed: int = 0
    # extensions: surface re-labelling of the same latent steps, and an
    # independent stream for sample draws (cross-vocabulary experiments)
    label_variant: int = 0
    sample_seed: int | None = None
    sequence_length: int | None = None

    def validate(self):
        for name in ("n_tasks", "n_steps", "horizon", "samples_per_task", "d_raw"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or value < 1:
                raise ValidationError(f"{name} must be a positive integer, got {value!r}", field=name)
        if self.n_steps < self.horizon:
            raise ValidationError(f"n_steps ({self.n_steps}) must be >= horizon ({self.horizon})", field="n_steps")
        if not (isinstance(self.noise_sigma, (int, float)) and math.isfinite(self.noise_sigma) and self.noise_sigma >= 0):
            raise ValidationError(f"noise_sigma must be a finite nonnegative number, got {self.noise_sigma!r}",
                                  field="noise_sigma")
        if self.n_steps > len(VERBS) * len(OBJECTS):
            raise ValidationError(f"n_steps exceeds the word bank capacity {len(VERBS) * len(OBJECTS)}",
                                  field="n_steps")
        if self.label_variant < 0:
            raise ValidationError("label_variant must be >= 0", field="label_variant")
        if self.sequence_length is not None and self.sequence_length < max(4, self.horizon):
            raise ValidationError(f"sequence_length must be >= {max(4, self.horizon)}", field="sequence_length")
        return self

    @classmethod
    def from_dict(cls, data: dict) -> GeneratorSpec:
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValidationError(f"unknown generator field(s): {sorted(unknown)}", field=sorted(unknown)[0])
        return cls(**data)


LATENT_DIM = 16


def _make_labels(rng, n_steps):
    pairs = rng.permutation(len(VERBS) * len(OBJECTS))[:n_steps]
    with_article = rng.random(n_steps) < 0.5
    labels = []
    for pair, art in zip(pairs, with_article):
        verb, obj = VERBS[pair // len(OBJECTS)], OBJECTS[pair % len(OBJECTS)]
        labels.append(f"{verb} the {obj}" if art else f"{verb} {obj}")
    return labels


def _paraphrase(labels, variant):
    rng = np.random.default_rng([variant, 7919])
    out = []
    for label in labels:
        words = label.split()
        verb, obj = words[0], words[-1]
        core = f"{verb} {obj}" if len(words) == 3 else f"{verb} the {obj}"
        out.append(f"{core} {ADVERBS[rng.integers(len(ADVERBS))]}")
    return out


def generate_synthetic_dataset(spec: GeneratorSpec, expander=None) -> tuple[Dataset, StepVocabulary]:
    """Draw a planning dataset whose start/goal features encode the first and last step of a task window."""
    from .encoders import DescriptionExpander

    spec.validate()
    expander = expander or DescriptionExpander()
    world = np.random.default_rng([spec.seed, 0])

    labels = _make_labels(world, spec.n_steps)
    seq_len = spec.sequence_length or min(spec.n_steps, max(4, spec.horizon) + 2)
    seq_len = max(seq_len, 4, spec.horizon)
    tasks = []
    for t in range(spec.n_tasks):
        seq = world.choice(spec.n_steps, size=seq_len, replace=seq_len > spec.n_steps)
        tasks.append(TaskSpec(t, tuple(int(i) for i in seq)))
    step_latent = world.standard_normal((spec.n_steps, LATENT_DIM))
    task_latent = world.standard_normal((spec.n_tasks, LATENT_DIM))
    g = world.standard_normal((2 * LATENT_DIM, spec.d_raw)) / math.sqrt(2 * LATENT_DIM)

    # relabelled variants keep the latent world but permute ids and surface text
    perm = np.arange(spec.n_steps)
    if spec.label_variant:
        labels = _paraphrase(labels, spec.label_variant)
        perm = np.random.default_rng([spec.seed, spec.label_variant, 1]).permutation(spec.n_steps)
    new_labels = [None] * spec.n_steps
    for old, new in enumerate(perm):
        new_labels[new] = labels[old]
    steps = [ActionStep(i, lab, expander.expand(lab)) for i, lab in enumerate(new_labels)]
    tasks = [TaskSpec(t.task_id, tuple(int(perm[i]) for i in t.canonical_sequence)) for t in tasks]

    sample_seed = spec.seed if spec.sample_seed is None else spec.sample_seed
    draw = np.random.default_rng([sample_seed, 1])
    samples = []
    inv = np.argsort(perm)
    for task in tasks:
        for _ in range(spec.samples_per_task):
            start = int(draw.integers(0, len(task.canonical_sequence) - spec.horizon + 1))
            window = task.canonical_sequence[start:start + spec.horizon]
            first = np.concatenate([step_latent[inv[window[0]]], task_latent[task.task_id]]) @ g
            last = np.concatenate([step_latent[inv[window[-1]]], task_latent[task.task_id]]) @ g
            noise = draw.standard_normal((2, spec.d_raw)) * spec.noise_sigma
            samples.append(PlanningSample(
                sample_id=len(samples),
                task_id=task.task_id,
                start_features=tuple(float(x) for x in first + noise[0]),
                goal_features=tuple(float(x) for x in last + noise[1]),
                gt_steps=tuple(int(i) for i in window),
            ))
    return Dataset(samples, spec.horizon, spec.d_raw, tasks), StepVocabulary(steps)


# ---------------------------------------------------------------- file I/O

def _dumps(record):
    return json.dumps(record, separators=(",", ":"))


def dumps_dataset(dataset: Dataset, vocabulary: StepVocabulary) -> str:
    buf = io.StringIO()
    buf.write(_dumps({"version": FORMAT_VERSION, "N": len(vocabulary), "horizon": dataset.horizon,
                      "d_raw": dataset.d_raw}) + "\n")
    for s in vocabulary.steps:
        buf.write(_dumps({"id": s.id, "label": s.label, "description": s.description}) + "\n")
    for t in dataset.tasks:
        buf.write(_dumps({"task_id": t.task_id, "canonical_sequence": list(t.canonical_sequence)}) + "\n")
    for s in dataset.samples:
        buf.write(_dumps({"sample_id": s.sample_id, "task_id": s.task_id,
                          "start_features": list(s.start_features), "goal_features": list(s.goal_features),
                          "gt_steps": list(s.gt_steps)}) + "\n")
    return buf.getvalue()


def save_dataset(dataset: Dataset, vocabulary: StepVocabulary, path) -> None:
    Path(path).write_text(dumps_dataset(dataset, vocabulary), encoding="utf-8")


def dataset_fingerprint(dataset: Dataset, vocabulary: StepVocabulary) -> str:
    return hashlib.sha256(dumps_dataset(dataset, vocabulary).encode("utf-8")).hexdigest()[:16]


def _require(record, keys, lineno):
    missing = [k for k in keys if k not in record]
    if missing:
        raise ParseError(f"record missing field(s) {missing}", line=lineno)


def loads_dataset(text: str) -> tuple[Dataset, StepVocabulary]:
    header = None
    steps, tasks, samples = [], [], []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            record = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ParseError(f"invalid JSON ({exc.msg})", line=lineno) from None
        if not isinstance(record, dict):
            raise ParseError("record is not an object", line=lineno)
        if header is None:
            _require(record, ("version", "N", "horizon", "d_raw"), lineno)
            if record["version"] != FORMAT_VERSION:
                raise ParseError(f"unsupported version {record['version']!r}", line=lineno)
            header = record
            continue
        try:
            if "sample_id" in record:
                _require(record, ("task_id", "start_features", "goal_features", "gt_steps"), lineno)
                samples.append((lineno, PlanningSample(
                    int(record["sample_id"]), int(record["task_id"]),
                    tuple(float(x) for x in record["start_features"]),
                    tuple(float(x) for x in record["goal_features"]),
                    tuple(int(x) for x in record["gt_steps"]))))
            elif "canonical_sequence" in record:
                tasks.append(TaskSpec(int(record["task_id"]), tuple(int(x) for x in record["canonical_sequence"])))
            elif "label" in record:
                _require(record, ("id", "description"), lineno)
                steps.append(ActionStep(int(record["id"]), str(record["label"]), str(record["description"])))
            else:
                raise ParseError("unrecognised record type", line=lineno)
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ParseError):
                raise
            raise ParseError(f"bad field value ({exc})", line=lineno) from None

    if header is None or not steps:
        raise IntegrityError("empty vocabulary")
    vocab = StepVocabulary(sorted(steps, key=lambda s: s.id))
    if len(vocab) != header["N"]:
        raise IntegrityError(f"header declares N={header['N']} but file has {len(vocab)} steps")
    horizon, d_raw = int(header["horizon"]), int(header["d_raw"])
    for t in tasks:
        bad = [i for i in t.canonical_sequence if not 0 <= i < len(vocab)]
        if bad:
            raise IntegrityError(f"task {t.task_id} references unknown step id(s) {bad}")
    for lineno, s in samples:
        bad = [i for i in s.gt_steps if not 0 <= i < len(vocab)]
        if bad:
            raise IntegrityError(f"sample {s.sample_id} (line {lineno}) references unknown step id(s) {bad}")
        if len(s.gt_steps) != horizon:
            raise IntegrityError(f"sample {s.sample_id} (line {lineno}) has {len(s.gt_steps)} steps, "
                                 f"header horizon is {horizon}")
        if len(s.start_features) != d_raw or len(s.goal_features) != d_raw:
            raise IntegrityError(f"sample {s.sample_id} (line {lineno}) features are not {d_raw}-dimensional")
        if not all(math.isfinite(x) for x in s.start_features + s.goal_features):
            raise IntegrityError(f"sample {s.sample_id} (line {lineno}) has non-finite features")
    return Dataset([s for _, s in samples], horizon, d_raw, tasks), vocab


def load_dataset(path) -> tuple[Dataset, StepVocabulary]:
    return loads_dataset(Path(path).read_text(encoding="utf-8"))


def split_dataset(dataset: Dataset, ratios=(0.8, 0.1, 0.1), seed: int = 0, by_task: bool = False):
    """Deterministic disjoint partition into train / val / test."""
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r <= 0 for r in ratios):
        raise ValidationError(f"ratios must be three positive numbers, got {ratios}", field="ratios")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValidationError(f"ratios must sum to 1, got {sum(ratios)!r}", field="ratios")
    rng = np.random.default_rng([seed, 2])

    def cut(n):
        a = int(round(ratios[0] * n))
        b = min(n - a, int(round(ratios[1] * n)))
        return a, a + b

    if by_task:
        task_ids = sorted({s.task_id for s in dataset.samples})
        order = [task_ids[i] for i in rng.permutation(len(task_ids))]
        a, b = cut(len(order))
        parts = [set(order[:a]), set(order[a:b]), set(order[b:])]
        return tuple(dataset.subset([s for s in dataset.samples if s.task_id in p]) for p in parts)
    order = rng.permutation(len(dataset.samples))
    a, b = cut(len(order))
    return tuple(dataset.subset([dataset.samples[i] for i in sorted(idx)])
                 for idx in (order[:a], order[a:b], order[b:]))

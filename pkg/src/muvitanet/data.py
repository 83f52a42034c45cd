"""Patients, visits, code vocabularies, and the on-disk bundle format.

Bundle directory layout::

    vocab.json          {"codes": [{"id", "category", "label"}, ...]}
    meta.json           {"tasks": [...], "complications": {name: {...}}}
    task_<name>.jsonl   one patient per line, with "label"
    unlabeled.jsonl     one patient per line, no "label"
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import (ParseError, StratificationError, ValidationError, VocabularyError)

CATEGORIES = ("diagnosis", "procedure", "medication")
NUM_AGE_GROUPS = 3  # 18-44, 45-54, 55-65
NUM_REGIONS = 5
DEMO_DIM = NUM_AGE_GROUPS + NUM_REGIONS

# Cardiovascular complications and their ICD-10 groups.
COMPLICATIONS = {
    "atrial_fibrillation": {"label": "Atrial Fibrillation", "icd10": ["I48"]},
    "coronary_artery_disease": {"label": "Coronary Artery Disease", "icd10": ["I20-I25"]},
    "heart_failure": {"label": "Heart failure", "icd10": ["I11", "I13", "I42", "I50"]},
    "hypertension": {"label": "Hypertension", "icd10": ["I10", "I16"]},
    "peripheral_arterial_disease": {"label": "Peripheral Arterial Disease", "icd10": ["I70"]},
    "stroke": {"label": "Stroke", "icd10": ["I60-I69"]},
}


@dataclass(frozen=True)
class CodeVocabulary:
    codes: tuple[str, ...]
    categories: tuple[str, ...]
    labels: tuple[str, ...] = ()

    def __post_init__(self):
        if len(self.codes) < 1:
            raise VocabularyError("vocabulary must hold at least one code")
        if len(set(self.codes)) != len(self.codes):
            raise VocabularyError("duplicate code identifiers in vocabulary")
        if len(self.categories) != len(self.codes):
            raise VocabularyError("one category per code required")
        bad = set(self.categories) - set(CATEGORIES)
        if bad:
            raise VocabularyError(f"unknown code categories {sorted(bad)}")
        if not self.labels:
            object.__setattr__(self, "labels", self.codes)
        elif len(self.labels) != len(self.codes):
            raise VocabularyError("one label per code required")
        object.__setattr__(self, "_index", {c: i for i, c in enumerate(self.codes)})

    def __len__(self) -> int:
        return len(self.codes)

    def index(self, code: str) -> int:
        try:
            return self._index[code]
        except KeyError:
            raise VocabularyError(f"unknown code {code!r}") from None

    def fingerprint(self) -> str:
        blob = json.dumps([self.codes, self.categories], separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def to_json(self) -> dict:
        return {"codes": [{"id": c, "category": k, "label": lab}
                          for c, k, lab in zip(self.codes, self.categories, self.labels)]}

    @classmethod
    def from_json(cls, obj: dict) -> "CodeVocabulary":
        entries = obj["codes"]
        return cls(tuple(e["id"] for e in entries), tuple(e["category"] for e in entries),
                   tuple(e.get("label", e["id"]) for e in entries))


@dataclass(frozen=True)
class Visit:
    codes: tuple[int, ...]
    t: int

    def __post_init__(self):
        if not self.codes:
            raise ValidationError("a visit needs at least one code")
        # a binary visit vector cannot hold multiplicity
        object.__setattr__(self, "codes", tuple(sorted(set(int(c) for c in self.codes))))


@dataclass(frozen=True)
class PatientRecord:
    patient_id: str
    age_group: int
    region: int
    visits: tuple[Visit, ...]

    def __post_init__(self):
        if not self.visits:
            raise ValidationError(f"patient {self.patient_id!r} has no visits")
        if not 0 <= self.age_group < NUM_AGE_GROUPS:
            raise ValidationError(f"patient {self.patient_id!r}: age group {self.age_group} out of range")
        if not 0 <= self.region < NUM_REGIONS:
            raise ValidationError(f"patient {self.patient_id!r}: region {self.region} out of range")
        ts = [v.t for v in self.visits]
        if any(b < a for a, b in zip(ts, ts[1:])):
            raise ValidationError(f"patient {self.patient_id!r}: timestamps decrease")

    @property
    def num_visits(self) -> int:
        return len(self.visits)

    @property
    def demographics(self) -> np.ndarray:
        d = np.zeros(DEMO_DIM)
        d[self.age_group] = 1.0
        d[NUM_AGE_GROUPS + self.region] = 1.0
        return d

    def distinct_codes(self) -> set[int]:
        return {c for v in self.visits for c in v.codes}

    def check_against(self, vocab_size: int) -> None:
        for v in self.visits:
            if v.codes[0] < 0 or v.codes[-1] >= vocab_size:
                raise VocabularyError(
                    f"patient {self.patient_id!r}: code index outside [0, {vocab_size})")

    def to_json(self, label: int | None = None) -> dict:
        obj = {"id": self.patient_id, "demo": {"age_group": self.age_group, "region": self.region},
               "visits": [{"t": v.t, "codes": list(v.codes)} for v in self.visits]}
        if label is not None:
            obj["label"] = int(label)
        return obj

    @classmethod
    def from_json(cls, obj: dict) -> "PatientRecord":
        return cls(str(obj["id"]), int(obj["demo"]["age_group"]), int(obj["demo"]["region"]),
                   tuple(Visit(tuple(v["codes"]), int(v["t"])) for v in obj["visits"]))


@dataclass(frozen=True)
class LabeledDataset:
    task: str
    records: tuple[PatientRecord, ...]
    labels: tuple[int, ...]

    def __post_init__(self):
        if len(self.records) != len(self.labels):
            raise ValidationError(f"task {self.task!r}: {len(self.records)} records, {len(self.labels)} labels")
        if any(y not in (0, 1) for y in self.labels):
            raise ValidationError(f"task {self.task!r}: labels must be 0 or 1")

    def __len__(self) -> int:
        return len(self.records)

    def subset(self, idx: Iterable[int]) -> "LabeledDataset":
        idx = list(idx)
        return LabeledDataset(self.task, tuple(self.records[i] for i in idx),
                              tuple(self.labels[i] for i in idx))


@dataclass(frozen=True)
class TaskBundle:
    vocab: CodeVocabulary
    labeled: tuple[LabeledDataset, ...]
    unlabeled: tuple[PatientRecord, ...] = ()
    meta: dict = field(default_factory=dict, compare=True, hash=False)

    def __post_init__(self):
        if not self.labeled:
            raise ValidationError("a bundle needs at least one labeled dataset")
        names = [d.task for d in self.labeled]
        if len(set(names)) != len(names):
            raise ValidationError("task names must be unique")
        n = len(self.vocab)
        for d in self.labeled:
            for r in d.records:
                r.check_against(n)
        for r in self.unlabeled:
            r.check_against(n)

    @property
    def task_names(self) -> list[str]:
        return [d.task for d in self.labeled]

    def dataset(self, task: str) -> LabeledDataset:
        for d in self.labeled:
            if d.task == task:
                return d
        raise KeyError(task)


def build_visit_matrix(record: PatientRecord, vocab: CodeVocabulary | int) -> np.ndarray:
    """Binary T x |C| matrix; row j marks the codes of visit j."""
    n = vocab if isinstance(vocab, int) else len(vocab)
    record.check_against(n)
    x = np.zeros((record.num_visits, n))
    for j, v in enumerate(record.visits):
        x[j, list(v.codes)] = 1.0
    return x


# ---------------------------------------------------------------- I/O


def _dump_line(obj) -> str:
    return json.dumps(obj, separators=(",", ":"), sort_keys=True)


def save_bundle(bundle: TaskBundle, path) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    (path / "vocab.json").write_text(json.dumps(bundle.vocab.to_json(), indent=1) + "\n", encoding="utf-8")
    meta = dict(bundle.meta)
    meta["tasks"] = bundle.task_names
    (path / "meta.json").write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    for d in bundle.labeled:
        with open(path / f"task_{d.task}.jsonl", "w", encoding="utf-8") as fh:
            for r, y in zip(d.records, d.labels):
                fh.write(_dump_line(r.to_json(y)) + "\n")
    with open(path / "unlabeled.jsonl", "w", encoding="utf-8") as fh:
        for r in bundle.unlabeled:
            fh.write(_dump_line(r.to_json()) + "\n")


def _read_jsonl(path: Path, labeled: bool):
    records, labels = [], []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            where = f"{path.name}:{lineno}"
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise ParseError(f"{where}: malformed JSON ({e.msg})") from None
            try:
                records.append(PatientRecord.from_json(obj))
                if labeled:
                    labels.append(int(obj["label"]))
            except (KeyError, TypeError, ValueError) as e:
                if isinstance(e, ValidationError):
                    raise ValidationError(f"{where}: {e}") from None
                raise ParseError(f"{where}: bad record ({e!r})") from None
    return records, labels


def load_bundle(path) -> TaskBundle:
    path = Path(path)
    try:
        vocab = CodeVocabulary.from_json(json.loads((path / "vocab.json").read_text(encoding="utf-8")))
        meta = json.loads((path / "meta.json").read_text(encoding="utf-8"))
    except FileNotFoundError as e:
        raise ParseError(f"missing bundle file {e.filename}") from None
    except (json.JSONDecodeError, KeyError) as e:
        raise ParseError(f"malformed vocab.json/meta.json: {e}") from None
    tasks = meta.pop("tasks")
    labeled = []
    for name in tasks:
        recs, labels = _read_jsonl(path / f"task_{name}.jsonl", labeled=True)
        labeled.append(LabeledDataset(name, tuple(recs), tuple(labels)))
    unl_path = path / "unlabeled.jsonl"
    unlabeled = _read_jsonl(unl_path, labeled=False)[0] if unl_path.exists() else []
    return TaskBundle(vocab, tuple(labeled), tuple(unlabeled), meta)


# ---------------------------------------------------------------- splitting


@dataclass(frozen=True)
class Fold:
    train: LabeledDataset
    validation: LabeledDataset
    test: LabeledDataset


def kfold_indices(labels: Sequence[int], folds: int, validation_fraction: float,
                  seed: int) -> list[tuple[list[int], list[int], list[int]]]:
    """Stratified (train, validation, test) index triples, one per fold."""
    labels = np.asarray(labels)
    if folds < 2:
        raise StratificationError("need at least 2 folds")
    if len(labels) < folds:
        raise StratificationError(f"{len(labels)} records cannot fill {folds} folds")
    if not 0.0 <= validation_fraction < 1.0:
        raise StratificationError("validation fraction must be in [0, 1)")
    rng = np.random.default_rng(seed)
    pos = rng.permutation(np.flatnonzero(labels == 1))
    neg = rng.permutation(np.flatnonzero(labels == 0))
    if len(pos) < folds or len(neg) < folds:
        raise StratificationError(
            f"{len(pos)} positives / {len(neg)} negatives cannot be stratified into {folds} folds")
    # deal each class round-robin so per-fold class counts differ by at most one;
    # the negative stream continues where the positives stopped
    members: list[list[int]] = [[] for _ in range(folds)]
    for i, idx in enumerate(np.concatenate([pos, neg])):
        members[i % folds].append(int(idx))
    out = []
    for k in range(folds):
        test = sorted(members[k])
        rest = [i for j in range(folds) if j != k for i in members[j]]
        rest_pos = [i for i in rest if labels[i] == 1]
        rest_neg = [i for i in rest if labels[i] == 0]
        vrng = np.random.default_rng([seed, k])
        val = []
        for group in (rest_pos, rest_neg):
            n_val = int(round(validation_fraction * len(group)))
            val.extend(vrng.permutation(group)[:n_val].tolist())
        val_set = set(val)
        train = sorted(i for i in rest if i not in val_set)
        out.append((train, sorted(val), test))
    return out


def kfold_split(dataset: LabeledDataset, folds: int = 5, validation_fraction: float = 0.1,
                seed: int = 0) -> list[Fold]:
    return [Fold(dataset.subset(tr), dataset.subset(va), dataset.subset(te))
            for tr, va, te in kfold_indices(dataset.labels, folds, validation_fraction, seed)]

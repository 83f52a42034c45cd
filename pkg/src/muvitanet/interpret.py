"""Attention-based explanations: global code rankings and per-patient case studies."""

from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .data import CodeVocabulary, LabeledDataset, PatientRecord, Visit
from .errors import ConfigError, DegenerateRecordError, LookupFailure, ParseError, TaskKindError
from .numerics import no_grad


@dataclass(frozen=True)
class FeatureRow:
    rank: int
    code_index: int
    code: str
    label: str
    weight: float
    patients: int     # positives whose record contains the code


@dataclass
class FeatureImportanceTable:
    task: str
    rows: list[FeatureRow]
    num_patients: int
    averaging: str = "mean over positive patients whose record contains the code"
    warning: str | None = None

    def top(self, k: int) -> list[FeatureRow]:
        return self.rows[:k]

    def rank_of(self, code_index: int) -> int | None:
        for row in self.rows:
            if row.code_index == code_index:
                return row.rank
        return None

    def to_json(self) -> dict:
        return {"task": self.task, "num_patients": self.num_patients, "averaging": self.averaging,
                "warning": self.warning, "rows": [asdict(r) for r in self.rows]}

    def csv_rows(self) -> list[list]:
        return [[self.task, r.rank, r.code, r.label, r.weight] for r in self.rows]


CSV_HEADER = ["task", "rank", "code", "label", "weight"]


def tables_to_csv(tables: Iterable[FeatureImportanceTable]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for t in tables:
        w.writerows(t.csv_rows())
    return buf.getvalue()


def aggregate_code_attention(betas: np.ndarray, records: Sequence[PatientRecord]) -> dict[int, tuple[float, int]]:
    """code -> (mean rescaled weight, #records containing it).

    Each record's weights are multiplied by its number of distinct codes, then
    averaged per code over the records in which that code occurs.
    """
    betas = np.asarray(betas, dtype=float)
    totals: dict[int, float] = {}
    counts: dict[int, int] = {}
    for beta, rec in zip(betas, records):
        present = rec.distinct_codes()
        scale = len(present)
        for c in present:
            totals[c] = totals.get(c, 0.0) + beta[c] * scale
            counts[c] = counts.get(c, 0) + 1
    return {c: (totals[c] / counts[c], counts[c]) for c in totals}


def _forward_attention(model, records: Sequence[PatientRecord], task: str, batch_size: int = 512):
    betas, gammas, preds = [], [], []
    with no_grad():
        for i in range(0, len(records), batch_size):
            chunk = records[i:i + batch_size]
            out = model.forward(model.batch(chunk), task)
            betas.append(None if out.beta is None else out.beta.data)
            gammas.append(None if out.gamma is None else out.gamma.data)
            preds.append(out.prediction.data)
    return betas, gammas, np.concatenate(preds)


def _check_task(model, task: str) -> None:
    if task not in model.tasks:
        raise ConfigError(f"unknown task {task!r}; model has {list(model.tasks)}")


def rank_features(model, dataset: LabeledDataset, vocab: CodeVocabulary, task: str | None = None,
                  positive_only: bool = True, batch_size: int = 512) -> FeatureImportanceTable:
    """Rank codes by their rescaled feature-view attention, averaged over (positive) patients."""
    task = task or dataset.task
    _check_task(model, task)
    records = [r for r, y in zip(dataset.records, dataset.labels) if y == 1 or not positive_only]
    if not records:
        return FeatureImportanceTable(task, [], 0, warning="no positive patients; table is empty")
    chunks, _, _ = _forward_attention(model, records, task, batch_size)
    if chunks[0] is None:
        raise TaskKindError("this model variant has no feature-view attention")
    agg = aggregate_code_attention(np.concatenate(chunks), records)
    # stable: descending weight, ties by vocabulary index
    order = sorted(agg, key=lambda c: (-agg[c][0], c))
    rows = [FeatureRow(i + 1, c, vocab.codes[c], vocab.labels[c], float(agg[c][0]), agg[c][1])
            for i, c in enumerate(order)]
    return FeatureImportanceTable(task, rows, len(records))


# ---------------------------------------------------------------- case studies


@dataclass(frozen=True)
class Removal:
    """Visits (0-based positions in the record) and/or code indices to delete."""

    visits: frozenset = frozenset()
    codes: frozenset = frozenset()

    def describe(self, vocab: CodeVocabulary | None = None) -> str:
        parts = []
        if self.visits:
            parts.append("visits=" + ",".join(str(v) for v in sorted(self.visits)))
        if self.codes:
            names = [vocab.codes[c] if vocab else str(c) for c in sorted(self.codes)]
            parts.append("codes=" + ",".join(names))
        return ";".join(parts) or "none"


def parse_removal(text: str, vocab: CodeVocabulary) -> Removal:
    """Parse ``"visits=3,9"``, ``"codes=D001,P020"`` or both joined by ``;``."""
    visits, codes = set(), set()
    for part in filter(None, (p.strip() for p in text.split(";"))):
        key, sep, value = part.partition("=")
        items = [v.strip() for v in value.split(",") if v.strip()]
        if not sep or not items:
            raise ParseError(f"bad removal {part!r}; expected visits=i,j or codes=ID,ID")
        if key.strip() == "visits":
            try:
                visits.update(int(v) for v in items)
            except ValueError:
                raise ParseError(f"visit positions must be integers: {value!r}") from None
        elif key.strip() == "codes":
            codes.update(vocab.index(v) for v in items)
        else:
            raise ParseError(f"unknown removal kind {key!r}")
    return Removal(frozenset(visits), frozenset(codes))


def apply_removal(record: PatientRecord, removal: Removal) -> PatientRecord:
    """Copy of ``record`` without the given visits and codes; emptied visits are dropped."""
    bad = [v for v in removal.visits if not 0 <= v < record.num_visits]
    if bad:
        raise LookupFailure(f"patient {record.patient_id!r} has no visit at position(s) {sorted(bad)}")
    kept = []
    for j, v in enumerate(record.visits):
        if j in removal.visits:
            continue
        codes = [c for c in v.codes if c not in removal.codes]
        if codes:
            kept.append(Visit(tuple(codes), v.t))
    if not kept:
        raise DegenerateRecordError(f"removing {removal.describe()} leaves patient {record.patient_id!r} empty")
    return PatientRecord(record.patient_id, record.age_group, record.region, tuple(kept))


def ablate_and_repredict(model, record: PatientRecord, task: str, removals: Sequence[Removal]) -> list[float]:
    _check_task(model, task)
    modified = [apply_removal(record, r) for r in removals]
    if not modified:
        return []
    return [float(p) for p in _forward_attention(model, modified, task)[2]]


@dataclass
class CaseStudyReport:
    patient_id: str
    task: str
    prediction: float
    visits: list[dict]       # {"position", "t", "weight"} by descending weight
    features: list[dict]     # {"code_index", "code", "label", "weight"} by descending weight
    ablations: list[dict] = field(default_factory=list)   # {"removed", "prediction"}

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> "CaseStudyReport":
        return cls(obj["patient_id"], obj["task"], float(obj["prediction"]), list(obj["visits"]),
                   list(obj["features"]), list(obj.get("ablations", [])))

    def render(self) -> str:
        lines = [f"patient {self.patient_id}  task {self.task}  predicted risk {self.prediction:.4f}",
                 "", "visit        weight"]
        lines += [f"#{v['position']:<4d} t={v['t']:<6d} {v['weight']:.4f}" for v in self.visits]
        lines += ["", "feature                         weight"]
        lines += [f"{f['code']:<8s}{f['label'][:22]:<24s}{f['weight']:.4f}" for f in self.features]
        if self.ablations:
            lines += ["", "removed                         risk"]
            lines += [f"{a['removed']:<32s}{a['prediction']:.4f}" for a in self.ablations]
        return "\n".join(lines) + "\n"


def explain_patient(model, record: PatientRecord, task: str, vocab: CodeVocabulary, top_k: int = 5,
                    removals: Sequence[Removal] = ()) -> CaseStudyReport:
    """Top visits by visit attention and top present codes by feature attention, from one forward pass."""
    _check_task(model, task)
    if top_k < 1:
        raise ConfigError("top_k must be >= 1")
    betas, gammas, pred = _forward_attention(model, [record], task)
    visits, features = [], []
    if gammas[0] is not None:
        gamma = gammas[0][0, : record.num_visits]
        order = sorted(range(record.num_visits), key=lambda j: (-gamma[j], j))[:top_k]
        visits = [{"position": j, "t": record.visits[j].t, "weight": float(gamma[j])} for j in order]
    if betas[0] is not None:
        beta = betas[0][0]
        present = sorted(record.distinct_codes())
        order = sorted(present, key=lambda c: (-beta[c], c))[:top_k]
        features = [{"code_index": c, "code": vocab.codes[c], "label": vocab.labels[c],
                     "weight": float(beta[c])} for c in order]
    report = CaseStudyReport(record.patient_id, task, float(pred[0]), visits, features)
    if removals:
        probs = ablate_and_repredict(model, record, task, removals)
        report.ablations = [{"removed": r.describe(vocab), "prediction": p} for r, p in zip(removals, probs)]
    return report


def find_patient(datasets: Iterable, patient_id: str) -> PatientRecord:
    for records in datasets:
        for r in records:
            if r.patient_id == patient_id:
                return r
    raise LookupFailure(f"unknown patient id {patient_id!r}")

"""Synthetic claims cohort with planted risk codes.

A cohort is simulated first. Each patient carries a latent risk score that
raises the per-visit chance of every planted risk code; the onset label of
task k is Bernoulli(sigmoid(intercept_k + weight * s_k)) where s_k counts
visits holding one of task k's planted codes (optionally recency-weighted).
Intercepts are calibrated so the cohort prevalence of each task matches
``positive_rate``.

Task datasets are then assembled like the real cohort construction: all
needed positives plus negatives at ``negative_to_positive_ratio`` : 1, and
the negatives nobody selected form the unlabeled pool.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import expit

from .data import (CATEGORIES, COMPLICATIONS, NUM_AGE_GROUPS, NUM_REGIONS, CodeVocabulary,
                   LabeledDataset, PatientRecord, TaskBundle, Visit)
from .errors import SpecError

@dataclass(frozen=True)
class SyntheticSpec:
    vocabulary_size: int = 40
    num_patients_per_task: int = 400
    tasks: tuple[str, ...] = ("atrial_fibrillation", "coronary_artery_disease", "heart_failure")
    positive_rate: float = 0.2
    negative_to_positive_ratio: float = 3.0
    visit_count_range: tuple[int, int] = (3, 10)
    codes_per_visit_range: tuple[int, int] = (1, 4)
    # task -> vocabulary indices; None derives an overlapping default layout
    planted_risk_codes: dict | None = None
    risk_code_weight: float = 1.5
    planted_code_base_logit: float = -2.5
    latent_scale: float = 1.0
    recency_half_life_days: float | None = None
    mean_gap_days: float = 30.0
    unlabeled_size: int = 200
    min_visits: int = 1
    calibration_size: int = 4000   # patients simulated to fit the label intercepts
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.visit_count_range
        clo, chi = self.codes_per_visit_range
        if self.vocabulary_size < 1:
            raise SpecError("vocabulary_size must be >= 1")
        if not self.tasks or len(set(self.tasks)) != len(self.tasks):
            raise SpecError("tasks must be a non-empty list of unique names")
        if not (1 <= self.min_visits <= lo <= hi):
            raise SpecError(f"visit_count_range {self.visit_count_range} invalid "
                            f"(min_visits={self.min_visits})")
        if not (1 <= clo <= chi):
            raise SpecError(f"codes_per_visit_range {self.codes_per_visit_range} invalid")
        if chi > self.vocabulary_size:
            raise SpecError(f"codes per visit ({chi}) exceeds vocabulary size ({self.vocabulary_size})")
        if not 0.0 < self.positive_rate < 1.0:
            raise SpecError("positive_rate must be in (0, 1)")
        if self.negative_to_positive_ratio <= 0:
            raise SpecError("negative_to_positive_ratio must be positive")
        if self.calibration_size < 1:
            raise SpecError("calibration_size must be >= 1")
        if self.num_patients_per_task < 2:
            raise SpecError("num_patients_per_task must be >= 2")
        planted = self.resolved_planted_codes()
        if set(planted) != set(self.tasks):
            raise SpecError("planted_risk_codes must name exactly the configured tasks")
        for task, codes in planted.items():
            if not codes:
                raise SpecError(f"task {task!r} has no planted risk codes")
            for c in codes:
                if not 0 <= c < self.vocabulary_size:
                    raise SpecError(f"planted code {c} for {task!r} outside the vocabulary")
        if len(self.planted_pool()) >= self.vocabulary_size:
            raise SpecError("planted codes leave no background codes")

    def resolved_planted_codes(self) -> dict[str, tuple[int, ...]]:
        if self.planted_risk_codes is not None:
            return {k: tuple(int(c) for c in v) for k, v in self.planted_risk_codes.items()}
        # neighbouring tasks share one code: {p0, p1}, {p1, p2}, ...
        n = len(self.tasks)
        pool = [min(2 + 3 * i, self.vocabulary_size - 1) for i in range(n + 1)]
        return {t: tuple(sorted({pool[i], pool[i + 1]})) for i, t in enumerate(self.tasks)}

    def planted_pool(self) -> list[int]:
        return sorted({c for cs in self.resolved_planted_codes().values() for c in cs})

    @property
    def positives_per_task(self) -> int:
        return int(round(self.num_patients_per_task / (1.0 + self.negative_to_positive_ratio)))

    def to_json(self) -> dict:
        d = asdict(self)
        d["tasks"] = list(self.tasks)
        d["visit_count_range"] = list(self.visit_count_range)
        d["codes_per_visit_range"] = list(self.codes_per_visit_range)
        d["planted_risk_codes"] = {k: list(v) for k, v in self.resolved_planted_codes().items()}
        return d

    @classmethod
    def from_json(cls, obj: dict) -> "SyntheticSpec":
        obj = dict(obj)
        for key in ("tasks", "visit_count_range", "codes_per_visit_range"):
            if key in obj:
                obj[key] = tuple(obj[key])
        if obj.get("planted_risk_codes") is not None:
            obj["planted_risk_codes"] = {k: tuple(v) for k, v in obj["planted_risk_codes"].items()}
        return cls(**obj)


def make_vocabulary(size: int) -> CodeVocabulary:
    n_diag = max(1, int(round(0.5 * size)))
    n_proc = int(round(0.3 * size)) if size > 1 else 0
    n_med = size - n_diag - n_proc
    codes, cats, labels = [], [], []
    for cat, n, prefix in zip(CATEGORIES, (n_diag, n_proc, n_med), ("D", "P", "M")):
        for i in range(n):
            codes.append(f"{prefix}{len(codes):03d}")
            cats.append(cat)
            labels.append(f"synthetic {cat} {i}")
    return CodeVocabulary(tuple(codes), tuple(cats), tuple(labels))


@dataclass
class Cohort:
    records: list[PatientRecord]
    labels: dict[str, np.ndarray]  # task -> 0/1 per record
    intercepts: dict[str, float] = field(default_factory=dict)


class _Simulator:
    def __init__(self, spec: SyntheticSpec):
        self.spec = spec
        self.planted = spec.resolved_planted_codes()
        self.pool = spec.planted_pool()
        background = [c for c in range(spec.vocabulary_size) if c not in set(self.pool)]
        order = np.random.default_rng([spec.seed, 7]).permutation(background)
        ranks = np.arange(1, len(order) + 1, dtype=float)
        self.background = order
        self.background_logp = np.log((1.0 / ranks) / (1.0 / ranks).sum())

    def patient(self, rng: np.random.Generator, pid: str) -> PatientRecord:
        s = self.spec
        latent = rng.normal()
        n_visits = int(rng.integers(s.visit_count_range[0], s.visit_count_range[1] + 1))
        p_planted = expit(s.planted_code_base_logit + s.latent_scale * latent)
        gaps = rng.geometric(1.0 / s.mean_gap_days, size=n_visits - 1)
        times = np.concatenate([[0], np.cumsum(gaps)]).astype(int)
        sizes = rng.integers(s.codes_per_visit_range[0], s.codes_per_visit_range[1] + 1, size=n_visits)
        sizes = np.minimum(sizes, len(self.background))
        # Zipf-weighted sampling without replacement via Gumbel top-k
        keys = self.background_logp + rng.gumbel(size=(n_visits, len(self.background)))
        order = np.argsort(-keys, axis=1, kind="stable")
        planted = rng.random((n_visits, len(self.pool))) < p_planted
        visits = []
        for j in range(n_visits):
            codes = self.background[order[j, : sizes[j]]].tolist()
            codes += [c for c, hit in zip(self.pool, planted[j]) if hit]
            visits.append(Visit(tuple(codes), int(times[j])))
        return PatientRecord(pid, int(rng.integers(NUM_AGE_GROUPS)), int(rng.integers(NUM_REGIONS)),
                             tuple(visits))

    def exposure(self, record: PatientRecord) -> dict[str, float]:
        hl = self.spec.recency_half_life_days
        t_last = record.visits[-1].t
        out = {}
        for task, codes in self.planted.items():
            cs = set(codes)
            total = 0.0
            for v in record.visits:
                if cs.intersection(v.codes):
                    total += 1.0 if hl is None else 2.0 ** (-(t_last - v.t) / hl)
            out[task] = total
        return out


def _calibrate(scores: np.ndarray, weight: float, rate: float) -> float:
    lo, hi = -50.0, 50.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if expit(mid + weight * scores).mean() < rate:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def generate_cohort(spec: SyntheticSpec, size: int) -> Cohort:
    """Simulate ``size`` patients with onset labels for every task."""
    sim = _Simulator(spec)
    cal_rng = np.random.default_rng([spec.seed, 1])
    cal = [sim.exposure(sim.patient(cal_rng, "cal")) for _ in range(spec.calibration_size)]
    intercepts = {t: _calibrate(np.array([e[t] for e in cal]), spec.risk_code_weight, spec.positive_rate)
                  for t in spec.tasks}
    rng = np.random.default_rng([spec.seed, 2])
    records, labels = [], {t: [] for t in spec.tasks}
    for i in range(size):
        rec = sim.patient(rng, f"P{i:06d}")
        exp_ = sim.exposure(rec)
        records.append(rec)
        for t in spec.tasks:
            p = expit(intercepts[t] + spec.risk_code_weight * exp_[t])
            labels[t].append(int(rng.random() < p))
    return Cohort(records, {t: np.array(v) for t, v in labels.items()}, intercepts)


def default_cohort_size(spec: SyntheticSpec) -> int:
    need_pos = spec.positives_per_task / spec.positive_rate
    return int(math.ceil(1.5 * need_pos)) + 4 * spec.unlabeled_size + 16


def generate_synthetic_bundle(spec: SyntheticSpec, cohort_size: int | None = None) -> TaskBundle:
    """Deterministic (given ``spec.seed``) task bundle with planted signal."""
    size = cohort_size or default_cohort_size(spec)
    cohort = generate_cohort(spec, size)
    rng = np.random.default_rng([spec.seed, 3])
    n_pos = spec.positives_per_task
    n_neg = spec.num_patients_per_task - n_pos
    if n_pos < 1 or n_neg < 1:
        raise SpecError("num_patients_per_task too small for the requested ratio")
    selected: set[int] = set()
    labeled = []
    for task in spec.tasks:
        y = cohort.labels[task]
        pos = np.flatnonzero(y == 1)
        neg = np.flatnonzero(y == 0)
        if len(pos) < n_pos or len(neg) < n_neg:
            raise SpecError(f"cohort of {size} has {len(pos)} positives / {len(neg)} negatives for "
                            f"{task!r}; need {n_pos} / {n_neg}")
        chosen = np.concatenate([rng.choice(pos, n_pos, replace=False),
                                 rng.choice(neg, n_neg, replace=False)])
        chosen = rng.permutation(chosen)
        selected.update(chosen.tolist())
        labeled.append(LabeledDataset(task, tuple(cohort.records[i] for i in chosen),
                                      tuple(int(y[i]) for i in chosen)))
    all_neg = np.ones(size, dtype=bool)
    for t in spec.tasks:
        all_neg &= cohort.labels[t] == 0
    spare = [i for i in np.flatnonzero(all_neg) if i not in selected]
    unlabeled = tuple(cohort.records[i] for i in spare[: spec.unlabeled_size])
    meta = {
        "complications": {t: COMPLICATIONS.get(t, {"label": t, "icd10": []}) for t in spec.tasks},
        "planted_risk_codes": {k: list(v) for k, v in spec.resolved_planted_codes().items()},
        "intercepts": {k: round(v, 12) for k, v in cohort.intercepts.items()},
        "cohort_size": size,
    }
    return TaskBundle(make_vocabulary(spec.vocabulary_size), tuple(labeled), unlabeled, meta)

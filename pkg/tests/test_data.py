import json
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from muvitanet.data import (DEMO_DIM, CodeVocabulary, LabeledDataset, PatientRecord, TaskBundle, Visit,
                            build_visit_matrix, kfold_indices, kfold_split, load_bundle, save_bundle)
from muvitanet.errors import ParseError, SpecError, StratificationError, ValidationError, VocabularyError
from muvitanet.synthetic import SyntheticSpec, generate_cohort, generate_synthetic_bundle, make_vocabulary


def rec(pid, *visits, age=0, region=0):
    return PatientRecord(pid, age, region, tuple(Visit(tuple(c), t) for c, t in visits))


SMALL = dict(num_patients_per_task=40, unlabeled_size=10, vocabulary_size=20, calibration_size=300)


# ---------------------------------------------------------------- types


def test_visit_matrix_examples():
    np.testing.assert_array_equal(build_visit_matrix(rec("a", ([0], 0)), 3), [[1, 0, 0]])
    np.testing.assert_array_equal(build_visit_matrix(rec("a", ([0, 2], 0), ([1], 4)), 3),
                                  [[1, 0, 1], [0, 1, 0]])
    with pytest.raises(VocabularyError):
        build_visit_matrix(rec("a", ([3], 0)), 3)


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=50, deadline=None)
def test_visit_matrix_row_sums(seed):
    rng = np.random.default_rng(seed)
    visits = [(rng.choice(9, size=rng.integers(1, 6), replace=False).tolist(), j * 3) for j in range(4)]
    r = rec("a", *visits)
    np.testing.assert_array_equal(build_visit_matrix(r, 9).sum(axis=1), [len(v.codes) for v in r.visits])


def test_visit_collapses_duplicates_and_rejects_empty():
    assert Visit((3, 1, 3), 0).codes == (1, 3)
    with pytest.raises(ValidationError):
        Visit((), 0)


def test_record_invariants():
    with pytest.raises(ValidationError):
        PatientRecord("x", 0, 0, ())
    with pytest.raises(ValidationError):
        rec("x", ([1], 5), ([2], 3))
    with pytest.raises(ValidationError):
        rec("x", ([1], 0), age=3)
    demo = rec("x", ([1], 0), age=2, region=4).demographics
    assert demo.shape == (DEMO_DIM,) and demo.sum() == 2 and demo[2] == 1 and demo[7] == 1


def test_vocabulary_invariants():
    with pytest.raises(VocabularyError):
        CodeVocabulary(("a", "a"), ("diagnosis", "diagnosis"))
    with pytest.raises(VocabularyError):
        CodeVocabulary((), ())
    v = make_vocabulary(10)
    assert CodeVocabulary.from_json(v.to_json()) == v
    assert v.index(v.codes[7]) == 7
    assert v.fingerprint() != make_vocabulary(11).fingerprint()


def test_labeled_dataset_validation():
    r = rec("a", ([0], 0))
    with pytest.raises(ValidationError):
        LabeledDataset("t", (r,), (1, 0))
    with pytest.raises(ValidationError):
        LabeledDataset("t", (r,), (2,))


# ---------------------------------------------------------------- synthetic data


def test_generation_is_deterministic(tmp_path):
    spec = SyntheticSpec(seed=3, **SMALL)
    a, b = generate_synthetic_bundle(spec), generate_synthetic_bundle(spec)
    save_bundle(a, tmp_path / "a")
    save_bundle(b, tmp_path / "b")
    for f in sorted((tmp_path / "a").iterdir()):
        assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes()


def test_dataset_ratio_and_disjoint_unlabeled():
    spec = SyntheticSpec(seed=1, **SMALL)
    bundle = generate_synthetic_bundle(spec)
    labeled_ids = set()
    for d in bundle.labeled:
        assert len(d) == 40 and sum(d.labels) == 10     # 3:1 negatives to positives
        labeled_ids |= {r.patient_id for r in d.records}
    assert len(bundle.unlabeled) == 10
    assert not labeled_ids & {r.patient_id for r in bundle.unlabeled}


def test_positive_rate_within_two_percent():
    spec = SyntheticSpec(seed=0, positive_rate=0.2)
    cohort = generate_cohort(spec, 10_000)
    for task in spec.tasks:
        assert abs(cohort.labels[task].mean() - 0.2) <= 0.02


def test_planted_codes_enriched_in_positives():
    spec = SyntheticSpec(seed=2, num_patients_per_task=400)
    bundle = generate_synthetic_bundle(spec)
    for d in bundle.labeled:
        planted = set(spec.resolved_planted_codes()[d.task])
        has = np.array([bool(planted & r.distinct_codes()) for r in d.records])
        y = np.array(d.labels) == 1
        assert has[y].mean() > has[~y].mean()


def test_neighbouring_tasks_share_a_planted_code():
    planted = SyntheticSpec().resolved_planted_codes()
    tasks = list(planted)
    for a, b in zip(tasks, tasks[1:]):
        assert set(planted[a]) & set(planted[b])


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=1000, deadline=None)
def test_generated_records_satisfy_invariants(seed):
    spec = SyntheticSpec(seed=seed, num_patients_per_task=8, unlabeled_size=4, vocabulary_size=16,
                         calibration_size=50)
    bundle = generate_synthetic_bundle(spec, cohort_size=160)
    n = len(bundle.vocab)
    for r in [r for d in bundle.labeled for r in d.records] + list(bundle.unlabeled):
        assert r.visits and r.visits[0].t == 0
        assert all(b.t >= a.t for a, b in zip(r.visits, r.visits[1:]))
        assert all(v.codes and len(set(v.codes)) == len(v.codes) and 0 <= min(v.codes) and max(v.codes) < n
                   for v in r.visits)
        assert r.demographics.sum() == 2


@pytest.mark.parametrize("bad", [
    dict(vocabulary_size=0),
    dict(positive_rate=1.0),
    dict(negative_to_positive_ratio=0),
    dict(visit_count_range=(0, 3)),
    dict(codes_per_visit_range=(1, 99)),
    dict(planted_risk_codes={"atrial_fibrillation": [99], "coronary_artery_disease": [1],
                             "heart_failure": [2]}),
])
def test_spec_validation(bad):
    with pytest.raises(SpecError):
        SyntheticSpec(**bad)


def test_spec_json_round_trip():
    spec = SyntheticSpec(seed=9, recency_half_life_days=90.0)
    back = SyntheticSpec.from_json(json.loads(json.dumps(spec.to_json())))
    assert back.to_json() == spec.to_json()
    assert generate_synthetic_bundle(SyntheticSpec.from_json(SyntheticSpec(**SMALL).to_json())) == \
        generate_synthetic_bundle(SyntheticSpec(**SMALL))


# ---------------------------------------------------------------- bundle I/O


def test_bundle_round_trip(tmp_path):
    bundle = generate_synthetic_bundle(SyntheticSpec(seed=4, **SMALL))
    save_bundle(bundle, tmp_path)
    assert load_bundle(tmp_path) == bundle


def test_truncated_file_names_line(tmp_path):
    bundle = generate_synthetic_bundle(SyntheticSpec(seed=4, **SMALL))
    save_bundle(bundle, tmp_path)
    path = tmp_path / f"task_{bundle.task_names[0]}.jsonl"
    lines = path.read_text().splitlines()
    path.write_text("\n".join(lines[:5] + [lines[5][:17]]) + "\n")
    with pytest.raises(ParseError, match=r":6:"):
        load_bundle(tmp_path)


def test_zero_visit_record_rejected(tmp_path):
    bundle = generate_synthetic_bundle(SyntheticSpec(seed=4, **SMALL))
    save_bundle(bundle, tmp_path)
    path = tmp_path / "unlabeled.jsonl"
    path.write_text(json.dumps({"id": "z", "demo": {"age_group": 0, "region": 0}, "visits": []}) + "\n")
    with pytest.raises(ValidationError, match="unlabeled.jsonl:1"):
        load_bundle(tmp_path)


def test_bundle_requires_unique_tasks():
    d = LabeledDataset("t", (rec("a", ([0], 0)),), (1,))
    with pytest.raises(ValidationError):
        TaskBundle(make_vocabulary(3), (d, d))


# ---------------------------------------------------------------- folds


def test_kfold_hundred_records():
    labels = [1] * 30 + [0] * 70
    folds = kfold_indices(labels, 5, 0.1, seed=0)
    tests = [set(te) for _, _, te in folds]
    assert all(len(t) == 20 for t in tests)
    assert all(not (a & b) for i, a in enumerate(tests) for b in tests[i + 1:])
    assert set().union(*tests) == set(range(100))
    for tr, va, te in folds:
        assert abs(sum(labels[i] for i in te) - 20 * 0.3) <= 1
        assert not set(va) & set(te) and not set(tr) & set(va) and not set(tr) & set(te)
        assert set(tr) | set(va) | set(te) == set(range(100))
    assert folds == kfold_indices(labels, 5, 0.1, seed=0)
    assert folds != kfold_indices(labels, 5, 0.1, seed=1)


@given(st.integers(5, 120), st.floats(0.05, 0.6), st.integers(0, 2**32 - 1))
@settings(max_examples=100, deadline=None)
def test_kfold_partition_property(n, pos_frac, seed):
    rng = np.random.default_rng(seed)
    labels = (rng.random(n) < pos_frac).astype(int)
    if labels.sum() < 5 or (1 - labels).sum() < 5:
        with pytest.raises(StratificationError):
            kfold_indices(labels, 5, 0.1, seed)
        return
    folds = kfold_indices(labels, 5, 0.1, seed)
    counts = Counter(i for _, _, te in folds for i in te)
    assert sorted(counts) == list(range(n)) and set(counts.values()) == {1}
    pos = labels.sum()
    for _, _, te in folds:
        assert abs(labels[te].sum() - pos / 5) <= 1


def test_kfold_split_datasets():
    d = LabeledDataset("t", tuple(rec(str(i), ([i % 3], 0)) for i in range(20)), tuple([1] * 5 + [0] * 15))
    folds = kfold_split(d, 5, 0.1, seed=0)
    assert len(folds) == 5 and all(len(f.test) == 4 for f in folds)
    with pytest.raises(StratificationError):
        kfold_split(d, 6)

import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_record, tiny_model
from muvitanet.data import LabeledDataset, PatientRecord, Visit
from muvitanet.errors import ConfigError, DegenerateRecordError, LookupFailure, ParseError, TaskKindError
from muvitanet.interpret import (CSV_HEADER, CaseStudyReport, Removal, aggregate_code_attention,
                                 apply_removal, explain_patient, find_patient, parse_removal, rank_features,
                                 tables_to_csv)
from muvitanet.synthetic import make_vocabulary

VOCAB = make_vocabulary(12)


def records(rng, n):
    return [random_record(rng, 12, pid=f"p{i}") for i in range(n)]


def uniform_betas(recs, vocab_size=12):
    out = np.zeros((len(recs), vocab_size))
    for i, r in enumerate(recs):
        present = sorted(r.distinct_codes())
        out[i, present] = 1.0 / len(present)
    return out


# ---------------------------------------------------------------- aggregation


def test_uniform_attention_scores_one(rng):
    recs = records(rng, 30)
    agg = aggregate_code_attention(uniform_betas(recs), recs)
    assert all(w == pytest.approx(1.0, abs=1e-12) for w, _ in agg.values())


def test_absent_codes_left_out():
    recs = [PatientRecord("a", 0, 0, (Visit((1, 2), 0),)), PatientRecord("b", 0, 0, (Visit((2, 5), 0),))]
    agg = aggregate_code_attention(uniform_betas(recs), recs)
    assert set(agg) == {1, 2, 5}
    assert agg[2][1] == 2 and agg[1][1] == 1


def test_aggregation_hand_case():
    recs = [PatientRecord("a", 0, 0, (Visit((0, 1), 0),)), PatientRecord("b", 0, 0, (Visit((0, 1, 2), 0),))]
    betas = np.zeros((2, 12))
    betas[0, [0, 1]] = [0.75, 0.25]
    betas[1, [0, 1, 2]] = [0.2, 0.2, 0.6]
    agg = aggregate_code_attention(betas, recs)
    # code 0: (0.75*2 + 0.2*3) / 2
    assert agg[0][0] == pytest.approx(1.05) and agg[2][0] == pytest.approx(1.8)


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=50, deadline=None)
def test_ranking_ignores_record_order(seed):
    rng = np.random.default_rng(seed)
    model = tiny_model(seed=seed % 7)
    recs = records(rng, 10)
    perm = rng.permutation(10)
    a = rank_features(model, LabeledDataset("a", tuple(recs), (1,) * 10), VOCAB)
    b = rank_features(model, LabeledDataset("a", tuple(recs[i] for i in perm), (1,) * 10), VOCAB)
    assert [r.code_index for r in a.rows] == [r.code_index for r in b.rows]
    np.testing.assert_allclose([r.weight for r in a.rows], [r.weight for r in b.rows], rtol=1e-12)


def test_rank_features_uses_positives_only(rng):
    recs = records(rng, 8)
    d = LabeledDataset("a", tuple(recs), (1, 0, 0, 0, 1, 0, 0, 0))
    table = rank_features(tiny_model(), d, VOCAB)
    assert table.num_patients == 2
    present = recs[0].distinct_codes() | recs[4].distinct_codes()
    assert {r.code_index for r in table.rows} == present
    assert [r.rank for r in table.rows] == list(range(1, len(present) + 1))
    assert all(a.weight >= b.weight for a, b in zip(table.rows, table.rows[1:]))


def test_rank_features_without_positives_warns(rng):
    d = LabeledDataset("a", tuple(records(rng, 4)), (0, 0, 0, 0))
    table = rank_features(tiny_model(), d, VOCAB)
    assert table.rows == [] and table.warning


def test_rank_features_needs_feature_view(rng):
    d = LabeledDataset("a", tuple(records(rng, 4)), (1, 0, 1, 0))
    with pytest.raises(TaskKindError):
        rank_features(tiny_model("-feature-view"), d, VOCAB)
    with pytest.raises(ConfigError):
        rank_features(tiny_model(), d, VOCAB, task="zzz")


def test_csv_and_json(rng):
    d = LabeledDataset("a", tuple(records(rng, 6)), (1,) * 6)
    table = rank_features(tiny_model(), d, VOCAB)
    lines = tables_to_csv([table]).splitlines()
    assert lines[0] == ",".join(CSV_HEADER) and len(lines) == len(table.rows) + 1
    assert json.loads(json.dumps(table.to_json()))["rows"][0]["rank"] == 1


# ---------------------------------------------------------------- case studies


def test_explain_patient_is_read_only(rng):
    model = tiny_model()
    before = {k: t.data.tobytes() for k, t in model.params.items()}
    r = random_record(rng, 12, max_visits=6)
    explain_patient(model, r, "a", VOCAB, top_k=3, removals=[Removal(visits=frozenset({0}))]
                    if r.num_visits > 1 else ())
    assert before == {k: t.data.tobytes() for k, t in model.params.items()}


def test_top_k_larger_than_record():
    r = PatientRecord("x", 0, 0, (Visit((1, 3), 0), Visit((4,), 5)))
    rep = explain_patient(tiny_model(), r, "a", VOCAB, top_k=10)
    assert len(rep.visits) == 2 and len(rep.features) == 3
    assert sum(v["weight"] for v in rep.visits) == pytest.approx(1.0)
    assert sum(f["weight"] for f in rep.features) <= 1.0 + 1e-12


def test_single_visit_weight_one():
    r = PatientRecord("x", 0, 0, (Visit((1, 3, 7), 0),))
    rep = explain_patient(tiny_model(), r, "b", VOCAB)
    assert rep.visits == [{"position": 0, "t": 0, "weight": 1.0}]


def test_identity_and_irrelevant_removals_keep_prediction(rng):
    model = tiny_model()
    r = PatientRecord("x", 1, 2, (Visit((1, 3), 0), Visit((4,), 5)))
    rep = explain_patient(model, r, "a", VOCAB, removals=[Removal(), Removal(codes=frozenset({9}))])
    assert [a["prediction"] for a in rep.ablations] == [rep.prediction, rep.prediction]


def test_removal_changes_record():
    r = PatientRecord("x", 0, 0, (Visit((1, 3), 0), Visit((3,), 5), Visit((2,), 9)))
    out = apply_removal(r, Removal(visits=frozenset({2}), codes=frozenset({3})))
    assert out.visits == (Visit((1,), 0),)
    with pytest.raises(DegenerateRecordError):
        apply_removal(r, Removal(codes=frozenset({1, 2, 3})))
    with pytest.raises(LookupFailure):
        apply_removal(r, Removal(visits=frozenset({3})))


def test_parse_removal():
    rm = parse_removal("visits=3,1; codes=%s,%s" % (VOCAB.codes[2], VOCAB.codes[5]), VOCAB)
    assert rm == Removal(frozenset({1, 3}), frozenset({2, 5}))
    assert parse_removal(rm.describe(VOCAB), VOCAB) == rm
    for bad in ("visits", "visits=a", "things=1", "codes="):
        with pytest.raises(ParseError):
            parse_removal(bad, VOCAB)


def test_report_round_trip_and_render():
    r = PatientRecord("x", 0, 0, (Visit((1, 3), 0), Visit((4,), 5)))
    rep = explain_patient(tiny_model(), r, "a", VOCAB, removals=[Removal(visits=frozenset({1}))])
    back = CaseStudyReport.from_json(json.loads(json.dumps(rep.to_json())))
    assert back == rep
    text = rep.render()
    assert "patient x" in text and "visits=1" in text


def test_find_patient():
    r = PatientRecord("x", 0, 0, (Visit((1,), 0),))
    assert find_patient([[r]], "x") is r
    with pytest.raises(LookupFailure):
        find_patient([[r]], "y")

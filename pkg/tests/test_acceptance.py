"""End-to-end acceptance checks, one test per criterion.

Each test records a single PASS/FAIL line that is echoed in the pytest
terminal summary. Criteria 9 and 10 share one set of training runs.
"""

import json
import math
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES, random_record, tiny_model
from muvitanet.cli import main as cli_main
from muvitanet.data import LabeledDataset, PatientRecord, Visit
from muvitanet.encoders import EncoderConfig, temporal_encoding
from muvitanet.errors import DegenerateRecordError
from muvitanet.heads import contrastive_loss
from muvitanet.interpret import Removal, ablate_and_repredict, rank_features
from muvitanet.model import ModelConfig, build_variant
from muvitanet.numerics import finite_difference_check, no_grad
from muvitanet.synthetic import SyntheticSpec, generate_synthetic_bundle
from muvitanet.trainer import (FoldTrainer, SamplingState, TrainerConfig, auroc, compute_sampling_rates,
                               evaluate, split_bundle, train_epoch)


def report(number: int, ok: bool, detail: str) -> None:
    ACCEPTANCE_LINES.append(f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}")
    assert ok, detail


def records_with_visits(rng, n, vocab, visits, pid="r"):
    out = []
    for i in range(n):
        vs = []
        for j in range(visits):
            m = int(rng.integers(1, 5))
            vs.append(Visit(tuple(rng.choice(vocab, size=m, replace=False).tolist()), 7 * j))
        out.append(PatientRecord(f"{pid}{i}", int(rng.integers(3)), int(rng.integers(5)), tuple(vs)))
    return out


# ---------------------------------------------------------------- 1


def test_criterion_01_gradients():
    rng = np.random.default_rng(1)
    model = tiny_model("full", vocab_size=12, hidden_dim=4, tasks=("a", "b"))
    rs = records_with_visits(rng, 9, 12, 5)

    def loss(_):
        return (model.labeled_loss(rs[0:3], [1, 0, 1], "a") + model.labeled_loss(rs[3:6], [0, 1, 0], "b")
                + model.unlabeled_loss(rs[6:9]))

    t0 = time.time()
    res = finite_difference_check(loss, model.params, tolerance=1e-4, max_coords=10**9)
    elapsed = time.time() - t0
    worst = max(res.errors, key=res.errors.get)
    report(1, res.passed and elapsed < 120,
           f"{len(res.errors)} tensors, every coordinate; worst rel err {res.errors[worst]:.2e} ({worst}); "
           f"{elapsed:.1f}s")


# ---------------------------------------------------------------- 2


def test_criterion_02_dimensions():
    rng = np.random.default_rng(2)
    failures = 0
    for i in range(500):
        d = 2 * int(rng.integers(1, 5))
        vocab = int(rng.integers(3, 30))
        variant = ("full", "-unlabeled", "-feature-view", "-visit-view", "-task-specific")[i % 5]
        model = build_variant(ModelConfig(EncoderConfig(vocab, d), ("a", "b"), variant), int(rng.integers(1000)))
        rs = [random_record(rng, vocab, max_visits=7, pid=str(j)) for j in range(int(rng.integers(1, 5)))]
        member = model.model_for("a") if variant == "-task-specific" else model
        batch = member.batch(rs)
        b, t = len(rs), max(r.num_visits for r in rs)
        with no_grad():
            shared = member.shared(batch)
            out = member.forward(batch, "a", shared)
        ok = True
        # a variant is named after the view it drops
        if variant != "-feature-view":
            ok &= shared.feature_view.shape == (b, vocab, 4 * d)
        if variant != "-visit-view":
            ok &= shared.visit_view.shape == (b, t, 2 * d) and shared.patient.shape == (b, 2 * d)
        want = 4 * d if variant in ("-feature-view", "-visit-view") else 8 * d
        ok &= out.rep.shape == (b, want) and out.prediction.shape == (b,)
        failures += not ok
    report(2, failures == 0, f"500 random configs, {failures} failures")


# ---------------------------------------------------------------- 3


def test_criterion_03_attention_distributions():
    rng = np.random.default_rng(3)
    worst = 0.0
    negative = 0
    passes = 0
    model = None
    while passes < 10_000:
        if passes % 250 == 0:
            vocab = int(rng.integers(4, 20))
            model = build_variant(ModelConfig(EncoderConfig(vocab, 4), ("a", "b")), int(rng.integers(10**6)))
        rs = [random_record(rng, vocab, max_visits=6, pid=str(j)) for j in range(4)]
        batch = model.batch(rs)
        with no_grad():
            shared = model.shared(batch)
            out = model.forward(batch, ("a", "b")[passes % 2], shared)
        alpha, beta, gamma = shared.code_attention.data, out.beta.data, out.gamma.data
        for i, r in enumerate(rs):
            sums = [alpha[i, j, : len(v.codes)].sum() for j, v in enumerate(r.visits)]
            sums += [beta[i].sum(), gamma[i, : r.num_visits].sum()]
            worst = max(worst, max(abs(s - 1.0) for s in sums))
        negative += int((alpha < 0).sum() + (beta < 0).sum() + (gamma < 0).sum())
        passes += 4
    report(3, worst <= 1e-6 and negative == 0,
           f"10000 forward passes; max |sum - 1| {worst:.1e}, {negative} negative weights")


# ---------------------------------------------------------------- 4


def test_criterion_04_temporal_encoding():
    rng = np.random.default_rng(4)
    bad = 0
    for _ in range(1000):
        d = 2 * int(rng.integers(1, 33))
        tj = float(rng.integers(0, 5000))
        tt = tj + float(rng.integers(0, 3000))
        shift = float(rng.integers(1, 5000))
        v = temporal_encoding(tj, tt, d)
        bad += not np.all(np.abs(v) <= 1.0)
        bad += not np.array_equal(v, temporal_encoding(tj + shift, tt + shift, d))
        bad += not np.array_equal(temporal_encoding(tt, tt, d), np.tile([0.0, 1.0], d // 2))
    report(4, bad == 0, f"1000 (t_j, t_T, d) triples, {bad} violations")


# ---------------------------------------------------------------- 5


def _unit(rng, n, d):
    v = rng.normal(size=(n, d))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _brute_contrastive(zf, zv):
    b = len(zf)
    z = list(zf) + list(zv)
    total = 0.0
    for i in range(b):
        num = math.exp(float(zf[i] @ zv[i]))
        for a in (i, b + i):
            den = sum(math.exp(float(z[a] @ z[j])) for j in range(2 * b) if j != a)
            total -= math.log(num / den)
    return total


def test_criterion_05_contrastive():
    rng = np.random.default_rng(5)
    single = max(abs(contrastive_loss(_unit(rng, 1, 6), _unit(rng, 1, 6)).item()) for _ in range(100))
    zf = np.array([[1.0, 0.0], [0.0, 1.0]])
    zv = np.array([[math.cos(0.3), math.sin(0.3)], [-1.0, 0.0]])
    hand = abs(contrastive_loss(zf, zv).item() - _brute_contrastive(zf, zv))
    perm = 0.0
    for _ in range(100):
        b = int(rng.integers(2, 9))
        zf, zv = _unit(rng, b, 5), _unit(rng, b, 5)
        p = rng.permutation(b)
        perm = max(perm, abs(contrastive_loss(zf, zv).item() - contrastive_loss(zf[p], zv[p]).item()))
    report(5, single <= 1e-9 and hand <= 1e-9 and perm <= 1e-9,
           f"B=1 |loss| {single:.1e}; B=2 vs brute force {hand:.1e}; permutation {perm:.1e}")


# ---------------------------------------------------------------- 6


def _pairs_auroc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    wins = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p in pos for n in neg)
    return wins / (len(pos) * len(neg))


def test_criterion_06_auroc_oracle():
    rng = np.random.default_rng(6)
    mismatches = 0
    for _ in range(1000):
        n = int(rng.integers(2, 51))
        labels = rng.integers(0, 2, size=n)
        labels[:2] = [0, 1]
        scores = rng.integers(0, int(rng.integers(1, 8)), size=n) / 7.0
        mismatches += auroc(scores, labels) != _pairs_auroc(scores, labels)
    report(6, mismatches == 0, f"1000 instances with ties, {mismatches} mismatches")


# ---------------------------------------------------------------- 7


def test_criterion_07_sampler():
    sizes, batches = [320, 640, 1280, 25600], [16, 16, 16, 256]
    lam = compute_sampling_rates(sizes, batches)
    ratio = np.array(sizes) / np.array(batches)
    formula_ok = np.allclose(lam, ratio / ratio.sum(), rtol=0, atol=1e-15)
    rng = np.random.default_rng(7)
    state = SamplingState.start(["a", "b", "c", "u"], sizes, batches, rng)
    counts = np.bincount([state.select(rng) for _ in range(10_000)], minlength=4)
    gap = np.abs(counts / 10_000 - lam).max()
    report(7, formula_ok and gap <= 0.02,
           f"lambda {np.round(lam, 4).tolist()}, observed {(counts / 10_000).tolist()}, max gap {gap:.4f}")


# ---------------------------------------------------------------- 8


def _separable_record(rng, pid, positive, vocab=40):
    # positives draw codes from the first half of the vocabulary, negatives from the second
    pool = np.arange(0, vocab // 2) if positive else np.arange(vocab // 2, vocab)
    visits, t = [], 0
    for j in range(int(rng.integers(2, 8))):
        t += int(rng.integers(1, 90)) if j else 0
        visits.append(Visit(tuple(rng.choice(pool, size=int(rng.integers(1, 6)), replace=False).tolist()), t))
    return PatientRecord(pid, int(rng.integers(3)), int(rng.integers(5)), tuple(visits))


def test_criterion_08_overfit():
    rng = np.random.default_rng(8)
    labels = [1] * 25 + [0] * 25
    data = LabeledDataset("task", tuple(_separable_record(rng, f"p{i}", y) for i, y in enumerate(labels)),
                          tuple(labels))
    unlabeled = tuple(_separable_record(rng, f"u{i}", i % 2) for i in range(50))
    cfg = TrainerConfig(epochs=200)
    model = build_variant(cfg.model_config(40, ("task",)), 0)
    train_rng = np.random.default_rng(0)
    t0 = time.time()
    best, epoch = 0.0, 0
    while epoch < 200 and best < 0.95:
        train_epoch(model, [data], unlabeled, cfg, train_rng)
        epoch += 1
        best = max(best, evaluate(model, data, cfg.eval_batch)[1])
    elapsed = time.time() - t0
    report(8, best >= 0.95 and elapsed < 300,
           f"training AU-ROC {best:.4f} after {epoch} epochs at defaults ({elapsed:.0f}s)")


# ---------------------------------------------------------------- 9 and 10

SEEDS = (0, 1, 2, 3, 4)
ORDER = ("full", "-unlabeled", "-feature-view", "-visit-view", "-task-specific")
ABLATION_EPOCHS = 50


@pytest.fixture(scope="module")
def ablation_runs():
    """seed -> {"bundle", "data", variant -> (mean test AU-ROC, selected model)}; first fold of five."""
    runs = {}
    for seed in SEEDS:
        bundle = generate_synthetic_bundle(SyntheticSpec(seed=seed, num_patients_per_task=2000))
        entry = {"bundle": bundle}
        for variant in ORDER:
            cfg = TrainerConfig(seed=seed, variant=variant, epochs=ABLATION_EPOCHS, max_folds=1)
            data = split_bundle(bundle, cfg)[0]
            trainer = FoldTrainer(data, cfg, len(bundle.vocab), 0)
            while not trainer.finished:
                trainer.run_epoch()
            scores = trainer.test_scores()
            entry[variant] = (float(np.mean(list(scores.values()))), trainer.best_model())
        runs[seed] = entry
    return runs


def test_criterion_09_ablation_ordering(ablation_runs):
    holds = 0
    lines = []
    for seed in SEEDS:
        s = {v: ablation_runs[seed][v][0] for v in ORDER}
        ok = s["full"] >= s["-unlabeled"] >= max(s["-feature-view"], s["-visit-view"]) >= s["-task-specific"]
        holds += ok
        lines.append(f"seed {seed} " + " ".join(f"{v}={s[v]:.4f}" for v in ORDER) + (" ok" if ok else " no"))
    print("\n".join(lines))
    report(9, holds >= 4, f"ordering holds in {holds}/5 seeds; " + "; ".join(lines))


def test_criterion_10_interpretability(ablation_runs):
    in_top5 = cells = lowered = 0
    details = []
    for seed in SEEDS:
        bundle = ablation_runs[seed]["bundle"]
        model = ablation_runs[seed]["full"][1]
        planted = SyntheticSpec(seed=seed).resolved_planted_codes()
        for d in bundle.labeled:
            codes = planted[d.task]
            table = rank_features(model, d, bundle.vocab, d.task)
            ranks = [table.rank_of(c) for c in codes]
            cells += 1
            in_top5 += all(r is not None and r <= 5 for r in ranks)
            removal = Removal(codes=frozenset(codes))
            deltas = []
            for rec, y in zip(d.records, d.labels):
                if y != 1 or not rec.distinct_codes() & set(codes):
                    continue
                try:
                    after = ablate_and_repredict(model, rec, d.task, [removal])[0]
                except DegenerateRecordError:
                    continue
                deltas.append(after - float(model.predict([rec], d.task)[0]))
            med = float(np.median(deltas))
            lowered += med < 0
            details.append(f"s{seed}/{d.task[:5]} ranks={ranks} median dy={med:+.4f}")
    print("\n".join(details))
    frac = in_top5 / cells
    report(10, frac >= 0.8 and lowered == cells,
           f"planted codes in top 5 for {in_top5}/{cells} cells ({frac:.0%}); "
           f"removal lowers median positive risk in {lowered}/{cells} cells")


# ---------------------------------------------------------------- 11


def test_criterion_11_cli_determinism(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({
        "synthetic": {"seed": 11, "vocabulary_size": 24, "num_patients_per_task": 80, "unlabeled_size": 40,
                      "calibration_size": 500},
        "trainer": {"hidden_dim": 4, "epochs": 2, "max_folds": 2}}))
    outputs = []
    for run in ("one", "two"):
        root = tmp_path / run
        assert cli_main(["generate", "--config", str(cfg), "--out", str(root / "data")]) == 0
        assert cli_main(["train", "--bundle", str(root / "data"), "--config", str(cfg),
                         "--out", str(root / "train")]) == 0
        assert cli_main(["evaluate", "--checkpoint", str(root / "train" / "checkpoints"),
                         "--bundle", str(root / "data"), "--out", str(root / "evaluate.json")]) == 0
        outputs.append([(root / "train" / "metrics.jsonl").read_bytes(), (root / "train" / "eval.json").read_bytes(),
                        (root / "evaluate.json").read_bytes()])
    same = outputs[0] == outputs[1]
    report(11, same, "generate -> train -> evaluate twice: metrics.jsonl, eval.json and evaluate output "
               + ("byte-identical" if same else "differ"))

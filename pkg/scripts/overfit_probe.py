"""Fit a small linearly separable task and print training AU-ROC as epochs go by.

Compares variants on the same data. ``--contrastive-scale`` multiplies the
unlabeled loss of the full variant, which shows how much the size of that
term slows the labeled fit under Adam.

    python scripts/overfit_probe.py --variants full -unlabeled --seeds 0 1 2
    python scripts/overfit_probe.py --variants full --contrastive-scale 0.01
"""

import argparse

import numpy as np

from muvitanet.data import LabeledDataset, PatientRecord, Visit
from muvitanet.model import build_variant
from muvitanet.trainer import TrainerConfig, evaluate, train_epoch


def separable_record(rng, pid, positive, vocab):
    # positives draw codes from the first half of the vocabulary, negatives from the second
    pool = np.arange(0, vocab // 2) if positive else np.arange(vocab // 2, vocab)
    visits, t = [], 0
    for j in range(int(rng.integers(2, 8))):
        t += int(rng.integers(1, 90)) if j else 0
        codes = rng.choice(pool, size=int(rng.integers(1, 6)), replace=False)
        visits.append(Visit(tuple(codes.tolist()), t))
    return PatientRecord(pid, int(rng.integers(3)), int(rng.integers(5)), tuple(visits))


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--variants", nargs="+", default=["full", "-unlabeled"])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0])
    ap.add_argument("--patients", type=int, default=50)
    ap.add_argument("--vocab", type=int, default=40)
    ap.add_argument("--epochs", type=int, default=200)
    ap.add_argument("--every", type=int, default=20)
    ap.add_argument("--contrastive-scale", type=float, default=1.0)
    args = ap.parse_args()

    for seed in args.seeds:
        for variant in args.variants:
            rng = np.random.default_rng(seed)
            labels = [1] * (args.patients // 2) + [0] * (args.patients - args.patients // 2)
            records = tuple(separable_record(rng, f"p{i}", y, args.vocab) for i, y in enumerate(labels))
            data = LabeledDataset("task", records, tuple(labels))
            unlabeled = tuple(separable_record(rng, f"u{i}", i % 2, args.vocab) for i in range(args.patients))
            cfg = TrainerConfig(epochs=args.epochs, variant=variant)
            model = build_variant(cfg.model_config(args.vocab, ("task",)), 0)
            if args.contrastive_scale != 1.0 and variant == "full":
                base = model.unlabeled_loss
                model.unlabeled_loss = lambda recs: base(recs) * args.contrastive_scale
            train_rng = np.random.default_rng(0)
            for epoch in range(1, args.epochs + 1):
                train_epoch(model, [data], unlabeled, cfg, train_rng)
                if epoch % args.every == 0 or epoch == args.epochs:
                    loss, auc = evaluate(model, data, cfg.eval_batch)
                    print(f"seed {seed} {variant:14s} epoch {epoch:4d} loss {loss:.4f} auroc {auc:.4f}", flush=True)


if __name__ == "__main__":
    main()

"""Train every variant on a planted-signal bundle and print test AU-ROC per seed.

    python scripts/run_ablation.py --seeds 0 1 2 --epochs 20 --patients 2000
"""

import argparse
import json
import time

from muvitanet.model import VARIANTS
from muvitanet.synthetic import SyntheticSpec, generate_synthetic_bundle
from muvitanet.trainer import TrainerConfig, run_cross_validation


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    ap.add_argument("--variants", nargs="+", default=list(VARIANTS))
    ap.add_argument("--patients", type=int, default=2000)
    ap.add_argument("--epochs", type=int, default=50)
    ap.add_argument("--lr", type=float, default=1e-4)
    ap.add_argument("--folds", type=int, default=1, help="folds actually trained (of 5)")
    ap.add_argument("--jobs", type=int, default=1)
    ap.add_argument("--out", default=None, help="write results as JSON here")
    args = ap.parse_args()

    results = {}
    for seed in args.seeds:
        bundle = generate_synthetic_bundle(SyntheticSpec(num_patients_per_task=args.patients, seed=seed))
        for variant in args.variants:
            t0 = time.time()
            cfg = TrainerConfig(epochs=args.epochs, seed=seed, variant=variant, learning_rate=args.lr,
                                max_folds=args.folds)
            res = run_cross_validation(bundle, cfg, jobs=args.jobs)
            results.setdefault(str(seed), {})[variant] = res.to_json()
            print(f"seed {seed} {variant:15s} overall {res.overall:.4f} "
                  + " ".join(f"{t[:6]}={res.mean(t):.3f}" for t in res.tasks)
                  + f" best_epochs={res.best_epochs} ({time.time() - t0:.0f}s)", flush=True)
    if args.out:
        with open(args.out, "w") as fh:
            json.dump(results, fh, indent=1)


if __name__ == "__main__":
    main()

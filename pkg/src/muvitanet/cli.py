"""Command-line entry point: generate, validate, train, evaluate, explain.

Config files are JSON with two optional sections::

    {
      "synthetic": {"seed": 0, "vocabulary_size": 40, "num_patients_per_task": 400, ...},
      "trainer":   {"hidden_dim": 16, "epochs": 50, "learning_rate": 1e-4, ...}
    }

``generate`` requires the three synthetic fields shown; everything else has
defaults. Command-line flags override file values. Errors print one line
``error[<tag>] exit=<code>: <message>`` on stderr.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import __version__
from .data import kfold_split, load_bundle, save_bundle
from .errors import CompatibilityError, ConfigError, DataError, LookupFailure, MuViTaNetError
from .interpret import explain_patient, find_patient, parse_removal, rank_features, tables_to_csv
from .model import VARIANTS
from .synthetic import SyntheticSpec, generate_synthetic_bundle
from .trainer import EvalResult, TrainerConfig, evaluate, run_cross_validation, selected_model

REQUIRED_SYNTHETIC = ("seed", "vocabulary_size", "num_patients_per_task")


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def load_config(path) -> dict:
    if path is None:
        return {}
    try:
        obj = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file {path} is not valid JSON: {e}") from None
    if not isinstance(obj, dict):
        raise ConfigError("config must be a JSON object")
    unknown = set(obj) - {"synthetic", "trainer"}
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    return obj


def synthetic_spec(cfg: dict) -> SyntheticSpec:
    section = cfg.get("synthetic")
    if section is None:
        raise ConfigError("missing config section 'synthetic'")
    for key in REQUIRED_SYNTHETIC:
        if key not in section:
            raise ConfigError(f"missing config field 'synthetic.{key}'")
    unknown = set(section) - set(SyntheticSpec.__dataclass_fields__)
    if unknown:
        raise ConfigError(f"unknown synthetic fields: {sorted(unknown)}")
    return SyntheticSpec.from_json(section)


def trainer_config(cfg: dict, args) -> TrainerConfig:
    values = dict(cfg.get("trainer", {}))
    for flag in ("variant", "epochs", "seed", "learning_rate", "max_folds"):
        v = getattr(args, flag, None)
        if v is not None:
            values[flag] = v
    try:
        return TrainerConfig.from_json(values)
    except TypeError as e:
        raise ConfigError(str(e)) from None


def _prepare_out(path, force: bool) -> Path:
    out = Path(path)
    if out.exists() and any(out.iterdir()) and not force:
        raise ConfigError(f"output directory {out} is not empty (use --force)")
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------- commands


def cmd_generate(args) -> int:
    spec = synthetic_spec(load_config(args.config))
    out = _prepare_out(args.out, args.force)
    bundle = generate_synthetic_bundle(spec)
    save_bundle(bundle, out)
    (out / "provenance.json").write_text(_dump({"generator": "muvitanet.synthetic", "version": __version__,
                                                "seed": spec.seed, "spec": spec.to_json()}))
    print(f"wrote {len(bundle.labeled)} tasks, {len(bundle.unlabeled)} unlabeled records to {out}")
    return 0


def cmd_validate(args) -> int:
    bundle = load_bundle(args.bundle)
    for d in bundle.labeled:
        pos = sum(d.labels)
        print(f"{d.task}: {len(d)} records, {pos} positive")
    print(f"unlabeled: {len(bundle.unlabeled)} records; vocabulary {len(bundle.vocab)} codes")
    return 0


def cmd_train(args) -> int:
    cfg = trainer_config(load_config(args.config), args)
    bundle = load_bundle(args.bundle)
    out = Path(args.out)
    if args.resume:
        out.mkdir(parents=True, exist_ok=True)
    else:
        _prepare_out(out, args.force)
    (out / "config.resolved.json").write_text(_dump({"trainer": cfg.to_json(), "bundle": str(args.bundle)}))
    result = run_cross_validation(bundle, cfg, jobs=args.jobs, checkpoint_dir=out / "checkpoints",
                                  resume=args.resume, metrics_path=out / "metrics.jsonl")
    (out / "eval.json").write_text(_dump(result.to_json()))
    for t in result.tasks:
        print(f"{t}: AU-ROC {result.mean(t):.4f} +/- {result.std(t):.4f}")
    print(f"overall: {result.overall:.4f}")
    return 0


def _checkpoint_paths(paths) -> list[Path]:
    out = []
    for p in map(Path, paths):
        out.extend(sorted(p.glob("fold_*.json")) if p.is_dir() else [p])
    if not out:
        raise ConfigError("no checkpoints given")
    return out


def _load_checkpoint(path: Path, bundle) -> dict:
    try:
        state = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise DataError(f"cannot read checkpoint {path}: {e}") from None
    if state.get("vocab_fingerprint") != bundle.vocab.fingerprint():
        raise CompatibilityError(f"checkpoint {path} was trained on a different vocabulary")
    return state


def cmd_evaluate(args) -> int:
    bundle = load_bundle(args.bundle)
    rows = []
    per_fold: dict[str, list[float]] = {t: [] for t in bundle.task_names}
    for path in _checkpoint_paths(args.checkpoint):
        state = _load_checkpoint(path, bundle)
        cfg = TrainerConfig.from_json(state["trainer"])
        model = selected_model(state)
        fold = int(state["fold"])
        for d in bundle.labeled:
            part = getattr(kfold_split(d, cfg.folds, cfg.validation_fraction, cfg.seed)[fold], args.split)
            loss, auc = evaluate(model, part, cfg.eval_batch)
            rows.append({"task": d.task, "fold": fold, "split": args.split, "loss": loss, "auroc": auc})
            per_fold[d.task].append(auc)
    result = EvalResult(bundle.task_names, per_fold)
    text = _dump({"rows": rows, "summary": result.to_json()})
    if args.out:
        Path(args.out).write_text(text)
    sys.stdout.write(text)
    return 0


def cmd_explain(args) -> int:
    bundle = load_bundle(args.bundle)
    state = _load_checkpoint(Path(args.checkpoint), bundle)
    model = selected_model(state)
    tasks = [args.task] if args.task else bundle.task_names
    out = Path(args.out) if args.out else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
    if args.patient is None:
        tables = []
        for t in tasks:
            table = rank_features(model, bundle.dataset(t), bundle.vocab, t)
            table.rows = table.top(args.top)
            tables.append(table)
        text = _dump([t.to_json() for t in tables])
        if out:
            (out / "feature_importance.json").write_text(text)
            (out / "feature_importance.csv").write_text(tables_to_csv(tables))
        sys.stdout.write(tables_to_csv(tables))
        return 0
    if not args.task:
        raise ConfigError("--patient needs --task")
    record = find_patient([d.records for d in bundle.labeled] + [bundle.unlabeled], args.patient)
    removals = [parse_removal(a, bundle.vocab) for a in args.ablate]
    report = explain_patient(model, record, args.task, bundle.vocab, args.top, removals)
    if out:
        (out / f"case_{record.patient_id}_{args.task}.json").write_text(_dump(report.to_json()))
    sys.stdout.write(report.render())
    return 0


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="muvitanet", description="Multi-view multi-task complication risk models.")
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic task bundle")
    g.add_argument("--config", required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--force", action="store_true")
    g.set_defaults(func=cmd_generate)

    v = sub.add_parser("validate", help="load a bundle and print a summary")
    v.add_argument("bundle")
    v.set_defaults(func=cmd_validate)

    t = sub.add_parser("train", help="cross-validated training")
    t.add_argument("--bundle", required=True)
    t.add_argument("--config")
    t.add_argument("--out", required=True)
    t.add_argument("--variant", choices=VARIANTS)
    t.add_argument("--epochs", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--learning-rate", dest="learning_rate", type=float)
    t.add_argument("--max-folds", dest="max_folds", type=int)
    t.add_argument("--jobs", type=int, default=1)
    t.add_argument("--resume", action="store_true")
    t.add_argument("--force", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="AU-ROC of selected checkpoints")
    e.add_argument("--checkpoint", nargs="+", required=True, help="fold checkpoint files or a directory")
    e.add_argument("--bundle", required=True)
    e.add_argument("--split", choices=("train", "validation", "test"), default="test")
    e.add_argument("--out")
    e.set_defaults(func=cmd_evaluate)

    x = sub.add_parser("explain", help="global feature ranking or a patient case study")
    x.add_argument("--checkpoint", required=True)
    x.add_argument("--bundle", required=True)
    x.add_argument("--task")
    mode = x.add_mutually_exclusive_group(required=True)
    mode.add_argument("--global", dest="patient", action="store_const", const=None)
    mode.add_argument("--patient")
    x.add_argument("--top", type=int, default=10)
    x.add_argument("--ablate", action="append", default=[], help='e.g. "visits=3,9" or "codes=D001"')
    x.add_argument("--out")
    x.set_defaults(func=cmd_explain)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except MuViTaNetError as e:
        print(f"error[{e.tag}] exit={e.exit_code}: {e}", file=sys.stderr)
        return e.exit_code
    except KeyError as e:
        err = LookupFailure(f"unknown key {e}")
        print(f"error[{err.tag}] exit={err.exit_code}: {err}", file=sys.stderr)
        return err.exit_code


if __name__ == "__main__":
    sys.exit(main())

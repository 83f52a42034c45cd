"""Alternating multi-task training, evaluation and cross-validation.

One epoch: every dataset (the labeled tasks and, for the full variant, the
unlabeled pool) is shuffled and cut into batches. Each step draws a dataset
with probability proportional to its batch count, takes its next batch, and
does one Adam update on that batch's loss, until all datasets are used up.
"""

from __future__ import annotations

import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

from .data import LabeledDataset, PatientRecord, TaskBundle, kfold_split
from .encoders import EncoderConfig
from .errors import (CompatibilityError, ConfigError, DomainError, TrainingDivergenceError,
                     UndefinedMetricError)
from .heads import bce_loss
from .model import UNLABELED_TASK, VARIANTS, ModelConfig, MuViTaNet, build_variant, model_from_state
from .numerics import adam_step


@dataclass(frozen=True)
class TrainerConfig:
    hidden_dim: int = 16
    epochs: int = 50
    labeled_batch: int = 16
    unlabeled_batch: int = 256
    learning_rate: float = 1e-4
    seed: int = 0
    variant: str = "full"
    kernel_width: int = 3
    proj_dim: int | None = None
    temperature: float = 1.0
    folds: int = 5
    validation_fraction: float = 0.1
    max_folds: int | None = None   # run only the first k folds
    eval_batch: int = 512

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.labeled_batch < 1 or self.unlabeled_batch < 1 or self.eval_batch < 1:
            raise ConfigError("batch sizes must be >= 1")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be positive")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.folds < 2:
            raise ConfigError("folds must be >= 2")
        if self.max_folds is not None and not 1 <= self.max_folds <= self.folds:
            raise ConfigError(f"max_folds must be in [1, {self.folds}]")
        if not 0.0 <= self.validation_fraction < 1.0:
            raise ConfigError("validation_fraction must be in [0, 1)")
        if self.hidden_dim < 2 or self.hidden_dim % 2:
            raise ConfigError("hidden_dim must be even and >= 2")
        if self.kernel_width < 1 or self.kernel_width % 2 == 0:
            raise ConfigError("kernel_width must be odd")
        if self.temperature <= 0:
            raise ConfigError("temperature must be positive")

    def model_config(self, vocab_size: int, tasks: Sequence[str]) -> ModelConfig:
        enc = EncoderConfig(vocab_size, self.hidden_dim, self.kernel_width)
        return ModelConfig(enc, tuple(tasks), self.variant, self.proj_dim, self.temperature)

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> "TrainerConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(obj) - known
        if unknown:
            raise ConfigError(f"unknown trainer fields: {sorted(unknown)}")
        return cls(**obj)


# ---------------------------------------------------------------- sampling


def compute_sampling_rates(dataset_sizes: Sequence[int], batch_sizes: Sequence[int]) -> np.ndarray:
    """lambda_k = (|D_k| / n_k) / sum_k' (|D_k'| / n_k')."""
    sizes = np.asarray(dataset_sizes, dtype=float)
    batches = np.asarray(batch_sizes, dtype=float)
    if sizes.shape != batches.shape or sizes.ndim != 1 or sizes.size == 0:
        raise DomainError("need one batch size per dataset")
    if np.any(batches <= 0):
        raise DomainError("batch sizes must be positive")
    if np.any(sizes <= 0):
        raise DomainError("dataset sizes must be positive")
    steps = sizes / batches
    return steps / steps.sum()


@dataclass
class SamplingState:
    """Remaining batches per dataset and the fixed rates they are drawn with."""

    names: list[str]
    rates: np.ndarray
    queues: list[list[np.ndarray]]

    @classmethod
    def start(cls, names: Sequence[str], sizes: Sequence[int], batch_sizes: Sequence[int],
              rng: np.random.Generator) -> "SamplingState":
        rates = compute_sampling_rates(sizes, batch_sizes)
        queues = []
        for n, b in zip(sizes, batch_sizes):
            order = rng.permutation(n)
            queues.append([order[i:i + b] for i in range(0, n, b)])
        return cls(list(names), rates, queues)

    @property
    def exhausted(self) -> bool:
        return not any(self.queues)

    def probabilities(self) -> np.ndarray:
        """Rates renormalized over datasets that still have batches."""
        live = np.array([bool(q) for q in self.queues])
        if not live.any():
            raise DomainError("every dataset is exhausted")
        p = np.where(live, self.rates, 0.0)
        return p / p.sum()

    def select(self, rng: np.random.Generator) -> int:
        return int(rng.choice(len(self.names), p=self.probabilities()))

    def consume(self, k: int) -> np.ndarray:
        if not self.queues[k]:
            raise DomainError(f"dataset {self.names[k]!r} is exhausted")
        return self.queues[k].pop(0)


@dataclass
class EpochSummary:
    losses: dict[str, float]   # mean batch loss per dataset
    steps: dict[str, int]

    @property
    def total_steps(self) -> int:
        return sum(self.steps.values())


def train_epoch(model: MuViTaNet, datasets: Sequence[LabeledDataset], unlabeled: Sequence[PatientRecord],
                config: TrainerConfig, rng: np.random.Generator, step_offset: int = 0) -> EpochSummary:
    """One pass of alternating training over ``datasets`` (+ ``unlabeled`` if the model uses it)."""
    names = [d.task for d in datasets if len(d)]
    sizes = [len(d) for d in datasets if len(d)]
    batches = [config.labeled_batch] * len(names)
    use_unlabeled = model.config.uses_unlabeled and len(unlabeled) > 0
    if use_unlabeled:
        names.append(UNLABELED_TASK)
        sizes.append(len(unlabeled))
        batches.append(config.unlabeled_batch)
    if not names:
        raise DomainError("nothing to train on")
    by_name = {d.task: d for d in datasets}
    state = SamplingState.start(names, sizes, batches, rng)
    totals = {n: 0.0 for n in names}
    steps = {n: 0 for n in names}
    step = step_offset
    while not state.exhausted:
        k = state.select(rng)
        idx = state.consume(k)
        name = names[k]
        if name == UNLABELED_TASK:
            loss = model.unlabeled_loss([unlabeled[i] for i in idx])
        else:
            d = by_name[name]
            loss = model.labeled_loss([d.records[i] for i in idx], [d.labels[i] for i in idx], name)
        value = loss.item()
        if not math.isfinite(value):
            raise TrainingDivergenceError(name, step, value)
        loss.backward()
        adam_step(model.params, config.learning_rate)
        totals[name] += value
        steps[name] += 1
        step += 1
    return EpochSummary({n: totals[n] / steps[n] for n in names}, steps)


# ---------------------------------------------------------------- metrics


def auroc(scores, labels) -> float:
    """Probability that a random positive outscores a random negative (ties count 1/2)."""
    s = np.asarray(scores, dtype=float)
    y = np.asarray(labels)
    if s.shape != y.shape or s.ndim != 1:
        raise DomainError(f"scores {s.shape} and labels {y.shape} must be equal-length vectors")
    if not np.all(np.isin(y, (0, 1))):
        raise DomainError("labels must be 0 or 1")
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AU-ROC needs at least one positive and one negative")
    ranks = rankdata(s, method="average")
    u = ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def evaluate(model, dataset: LabeledDataset, batch_size: int = 512) -> tuple[float, float]:
    """(BCE loss, AU-ROC) of ``model`` on one labeled dataset."""
    pred = model.predict(list(dataset.records), dataset.task, batch_size)
    loss = bce_loss(pred, np.asarray(dataset.labels, dtype=float)).item()
    return loss, auroc(pred, dataset.labels)


# ---------------------------------------------------------------- one fold


def _members(model) -> list[tuple[MuViTaNet, tuple[str, ...]]]:
    """Independently trained parameter groups and the tasks each one owns."""
    if hasattr(model, "models"):
        return [(m, (t,)) for t, m in model.models.items()]
    return [(model, model.tasks)]


@dataclass
class FoldData:
    train: list[LabeledDataset]
    validation: list[LabeledDataset]
    test: list[LabeledDataset]
    unlabeled: tuple[PatientRecord, ...] = ()


def split_bundle(bundle: TaskBundle, config: TrainerConfig) -> list[FoldData]:
    per_task = [kfold_split(d, config.folds, config.validation_fraction, config.seed) for d in bundle.labeled]
    out = []
    for k in range(config.folds):
        out.append(FoldData([f[k].train for f in per_task], [f[k].validation for f in per_task],
                            [f[k].test for f in per_task], tuple(bundle.unlabeled)))
    return out


class FoldTrainer:
    """Training state of one fold: model, sampler RNG, epoch counter, best snapshots.

    Model selection happens at epoch granularity. The untrained model (epoch
    0) is a candidate too. Each independently trained member keeps the
    epoch with its best mean validation AU-ROC; ties keep the earlier epoch.
    """

    def __init__(self, data: FoldData, config: TrainerConfig, vocab_size: int, fold: int,
                 fingerprint: str = ""):
        self.data = data
        self.config = config
        self.fold = fold
        self.fingerprint = fingerprint
        tasks = [d.task for d in data.train]
        self.model = build_variant(config.model_config(vocab_size, tasks), seed=[config.seed, fold])
        self.rng = np.random.default_rng([config.seed, fold, 1])
        self.epoch = 0
        self.step = 0
        self.best: list[dict] = []
        self.metrics: list[dict] = []
        self._record_selection()

    @property
    def finished(self) -> bool:
        return self.epoch >= self.config.epochs

    def _validation_scores(self) -> dict[str, tuple[float, float]]:
        return {d.task: evaluate(self.model, d, self.config.eval_batch) for d in self.data.validation}

    def _record_selection(self) -> None:
        scores = self._validation_scores() if self.data.validation and self.data.validation[0] else {}
        for task, (loss, auc) in scores.items():
            self.metrics.append({"fold": self.fold, "epoch": self.epoch, "task": task, "split": "validation",
                                 "loss": loss, "auroc": auc})
        for i, (member, tasks) in enumerate(_members(self.model)):
            score = float(np.mean([scores[t][1] for t in tasks])) if scores else float(self.epoch)
            if i == len(self.best):
                self.best.append({"epoch": self.epoch, "score": score, "params": member.params.values_copy()})
            elif score > self.best[i]["score"] or not scores:
                self.best[i] = {"epoch": self.epoch, "score": score, "params": member.params.values_copy()}

    def run_epoch(self) -> None:
        by_task = {d.task: d for d in self.data.train}
        for member, tasks in _members(self.model):
            summary = train_epoch(member, [by_task[t] for t in tasks], self.data.unlabeled,
                                  self.config, self.rng, self.step)
            self.step += summary.total_steps
            for name, loss in summary.losses.items():
                self.metrics.append({"fold": self.fold, "epoch": self.epoch + 1, "task": name,
                                     "split": "train", "loss": loss, "auroc": None})
        self.epoch += 1
        self._record_selection()

    def test_scores(self) -> dict[str, float]:
        """Test AU-ROC per task using each member's selected snapshot."""
        out = {}
        for (member, tasks), best in zip(_members(self.model), self.best):
            current = member.params.values_copy()
            member.params.load_values(best["params"])
            try:
                for d in self.data.test:
                    if d.task in tasks:
                        loss, auc = evaluate(member, d, self.config.eval_batch)
                        out[d.task] = auc
                        self.metrics.append({"fold": self.fold, "epoch": best["epoch"], "task": d.task,
                                             "split": "test", "loss": loss, "auroc": auc})
            finally:
                member.params.load_values(current)
        return out

    def best_model(self):
        """A copy of the model carrying the selected parameters."""
        model = model_from_state(self.model.to_state())
        for (member, _), best in zip(_members(model), self.best):
            member.params.load_values(best["params"])
        return model

    # -- checkpoints

    def to_checkpoint(self) -> dict:
        return {
            "trainer": self.config.to_json(),
            "vocab_fingerprint": self.fingerprint,
            "fold": self.fold,
            "epoch": self.epoch,
            "step": self.step,
            "completed": self.finished,
            "rng": self.rng.bit_generator.state,
            "model": self.model.to_state(),
            "best": [{"epoch": b["epoch"], "score": b["score"],
                      "params": {k: v.tolist() for k, v in b["params"].items()}} for b in self.best],
            "metrics": self.metrics,
        }

    def load_checkpoint(self, state: dict) -> None:
        if state.get("vocab_fingerprint", "") != self.fingerprint:
            raise CompatibilityError("checkpoint was written for a different vocabulary")
        saved = dict(state["trainer"])
        mine = self.config.to_json()
        # epochs may be raised on resume; everything else must match
        saved.pop("epochs", None)
        mine = {k: v for k, v in mine.items() if k != "epochs"}
        if saved != mine:
            raise CompatibilityError("checkpoint was written with a different trainer config")
        if state["fold"] != self.fold:
            raise CompatibilityError(f"checkpoint is for fold {state['fold']}, not {self.fold}")
        self.model = model_from_state(state["model"])
        self.epoch = int(state["epoch"])
        self.step = int(state["step"])
        self.rng = np.random.default_rng()
        self.rng.bit_generator.state = state["rng"]
        self.best = [{"epoch": b["epoch"], "score": b["score"],
                      "params": {k: np.asarray(v, dtype=np.float64) for k, v in b["params"].items()}}
                     for b in state["best"]]
        self.metrics = list(state["metrics"])


def _write_json_atomic(path: Path, obj) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(obj))
    os.replace(tmp, path)


@dataclass
class FoldResult:
    fold: int
    test_auroc: dict[str, float]
    best_epochs: list[int]
    metrics: list[dict]


def run_fold(data: FoldData, config: TrainerConfig, vocab_size: int, fold: int, fingerprint: str = "",
             checkpoint: str | Path | None = None, resume: bool = False) -> FoldResult:
    trainer = FoldTrainer(data, config, vocab_size, fold, fingerprint)
    path = Path(checkpoint) if checkpoint else None
    if resume and path is not None and path.exists():
        trainer.load_checkpoint(json.loads(path.read_text()))
    while not trainer.finished:
        trainer.run_epoch()
        if path is not None:
            _write_json_atomic(path, trainer.to_checkpoint())
    scores = trainer.test_scores()
    if path is not None:
        _write_json_atomic(path, trainer.to_checkpoint())
    return FoldResult(fold, scores, [b["epoch"] for b in trainer.best], trainer.metrics)


# ---------------------------------------------------------------- cross-validation


@dataclass
class EvalResult:
    tasks: list[str]
    per_fold: dict[str, list[float]]            # task -> test AU-ROC per fold
    best_epochs: list[list[int]] = field(default_factory=list)

    def mean(self, task: str) -> float:
        return float(np.mean(self.per_fold[task]))

    def std(self, task: str) -> float:
        return float(np.std(self.per_fold[task]))

    @property
    def overall(self) -> float:
        return float(np.mean([self.mean(t) for t in self.tasks]))

    def to_json(self) -> dict:
        return {
            "tasks": {t: {"folds": self.per_fold[t], "mean": self.mean(t), "std": self.std(t)}
                      for t in self.tasks},
            "overall": self.overall,
            "best_epochs": self.best_epochs,
        }


def _run_fold_job(args) -> FoldResult:
    return run_fold(*args)


def run_cross_validation(bundle: TaskBundle, config: TrainerConfig, jobs: int = 1,
                         checkpoint_dir: str | Path | None = None, resume: bool = False,
                         metrics_path: str | Path | None = None) -> EvalResult:
    """Train and test every fold; folds are independent and may run in parallel."""
    folds = split_bundle(bundle, config)[: config.max_folds or config.folds]
    fp = bundle.vocab.fingerprint()
    ckdir = Path(checkpoint_dir) if checkpoint_dir else None
    if ckdir is not None:
        ckdir.mkdir(parents=True, exist_ok=True)
    jobs_args = [(data, config, len(bundle.vocab), k, fp,
                  ckdir / f"fold_{k}.json" if ckdir else None, resume) for k, data in enumerate(folds)]
    if jobs > 1 and len(folds) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_fold_job, jobs_args))
    else:
        results = [_run_fold_job(a) for a in jobs_args]
    tasks = bundle.task_names
    result = EvalResult(tasks, {t: [r.test_auroc[t] for r in results] for t in tasks},
                        [r.best_epochs for r in results])
    if metrics_path is not None:
        write_metrics(metrics_path, [m for r in results for m in r.metrics])
    return result


def write_metrics(path, rows: Sequence[dict]) -> None:
    with open(path, "w") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def selected_model(checkpoint: dict):
    """Rebuild the model stored in a fold checkpoint with its selected (best-epoch) parameters."""
    model = model_from_state(checkpoint["model"])
    for (member, _), best in zip(_members(model), checkpoint["best"]):
        member.params.load_values({k: np.asarray(v, dtype=np.float64) for k, v in best["params"].items()})
    return model

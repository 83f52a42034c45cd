"""MuViTaNet wiring: encoder + per-task heads, plus the ablation variants.

Variant -> active parts (F: feature view, V: visit view, L: multi-task
labeled heads, U: contrastive unlabeled head):

    full            F V L U
    -unlabeled      F V L
    -feature-view     V L
    -visit-view     F   L
    -task-specific  F V      one independent model per task, linear decoder
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .data import PatientRecord
from .encoders import EncoderConfig, RecordBatch, SharedRepresentation, encode, init_encoder_params, make_batch
from .errors import ConfigError, TaskKindError
from .heads import (HeadLayout, TaskOutput, bce_loss, contrastive_loss, decode_labeled,
                    init_head_params, project_unlabeled, task_attention)
from .numerics import ParamStore, Tensor, no_grad

VARIANTS = ("full", "-feature-view", "-visit-view", "-task-specific", "-unlabeled")
UNLABELED_TASK = "__unlabeled__"


@dataclass(frozen=True)
class ModelConfig:
    encoder: EncoderConfig
    tasks: tuple[str, ...]
    variant: str = "full"
    proj_dim: int | None = None
    temperature: float = 1.0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if not self.tasks:
            raise ConfigError("at least one labeled task is required")
        if UNLABELED_TASK in self.tasks:
            raise ConfigError(f"task name {UNLABELED_TASK!r} is reserved")
        if self.temperature <= 0:
            raise ConfigError("temperature must be positive")

    @property
    def feature_view(self) -> bool:
        return self.variant != "-feature-view"

    @property
    def visit_view(self) -> bool:
        return self.variant != "-visit-view"

    @property
    def uses_unlabeled(self) -> bool:
        return self.variant == "full"

    @property
    def single_task(self) -> bool:
        return self.variant == "-task-specific"

    def layout(self, kind: str = "labeled") -> HeadLayout:
        return HeadLayout(self.encoder.hidden_dim, self.feature_view, self.visit_view, kind,
                          linear_decoder=self.single_task, proj_dim=self.proj_dim)

    def to_json(self) -> dict:
        d = asdict(self)
        d["tasks"] = list(self.tasks)
        return d

    @classmethod
    def from_json(cls, obj: dict) -> "ModelConfig":
        return cls(EncoderConfig(**obj["encoder"]), tuple(obj["tasks"]), obj["variant"],
                   obj.get("proj_dim"), obj.get("temperature", 1.0))


class MuViTaNet:
    """Shared encoder and per-task heads over one ``ParamStore``."""

    def __init__(self, config: ModelConfig, seed=0, params: ParamStore | None = None):
        self.config = config
        if params is None:
            rng = np.random.default_rng(seed)
            params = ParamStore()
            init_encoder_params(params, config.encoder, rng, config.feature_view, config.visit_view)
            for task in config.tasks:
                init_head_params(params, f"head.{task}", config.layout("labeled"), rng)
            if config.uses_unlabeled:
                init_head_params(params, f"head.{UNLABELED_TASK}", config.layout("unlabeled"), rng)
        self.params = params

    @property
    def tasks(self) -> tuple[str, ...]:
        return self.config.tasks

    def head(self, task: str) -> dict:
        if task != UNLABELED_TASK and task not in self.config.tasks:
            raise ConfigError(f"unknown task {task!r}")
        head = self.params.group(f"head.{task}")
        if not head:
            raise TaskKindError(f"model has no head for {task!r}")
        return head

    def batch(self, records: Sequence[PatientRecord]) -> RecordBatch:
        return make_batch(records, self.config.encoder.vocab_size)

    def shared(self, batch: RecordBatch) -> SharedRepresentation:
        return encode(batch, self.params, self.config.encoder,
                      self.config.feature_view, self.config.visit_view)

    def forward(self, batch: RecordBatch, task: str,
                shared: SharedRepresentation | None = None) -> TaskOutput:
        shared = shared or self.shared(batch)
        head = self.head(task)
        out = task_attention(shared, head)
        if task == UNLABELED_TASK:
            out.z_feature, out.z_visit = project_unlabeled(out.g_feature, out.g_visit, shared.patient, head)
        else:
            out.prediction = decode_labeled(out.rep, head)
        return out

    def labeled_loss(self, records, labels, task: str) -> Tensor:
        return bce_loss(self.forward(self.batch(records), task).prediction, labels)

    def unlabeled_loss(self, records) -> Tensor:
        if not self.config.uses_unlabeled:
            raise TaskKindError(f"variant {self.config.variant!r} has no contrastive task")
        out = self.forward(self.batch(records), UNLABELED_TASK)
        return contrastive_loss(out.z_feature, out.z_visit, self.config.temperature)

    def predict(self, records: Sequence[PatientRecord], task: str, batch_size: int = 512) -> np.ndarray:
        out = []
        with no_grad():
            for i in range(0, len(records), batch_size):
                out.append(self.forward(self.batch(records[i:i + batch_size]), task).prediction.data)
        return np.concatenate(out) if out else np.zeros(0)

    def to_state(self) -> dict:
        return {"config": self.config.to_json(), **self.params.to_state()}

    @classmethod
    def from_state(cls, state: dict) -> "MuViTaNet":
        return cls(ModelConfig.from_json(state["config"]), params=ParamStore.from_state(state))


class SingleTaskEnsemble:
    """The -task-specific variant: one independently trained model per task."""

    def __init__(self, config: ModelConfig, seed=0, models: dict | None = None):
        self.config = config
        if models is None:
            models = {}
            for i, task in enumerate(config.tasks):
                sub = ModelConfig(config.encoder, (task,), "-task-specific", config.proj_dim,
                                  config.temperature)
                models[task] = MuViTaNet(sub, seed=[*_seed_list(seed), i])
        self.models: dict[str, MuViTaNet] = models

    @property
    def tasks(self) -> tuple[str, ...]:
        return self.config.tasks

    def model_for(self, task: str) -> MuViTaNet:
        try:
            return self.models[task]
        except KeyError:
            raise ConfigError(f"unknown task {task!r}") from None

    def batch(self, records):
        return make_batch(records, self.config.encoder.vocab_size)

    def forward(self, batch: RecordBatch, task: str, shared=None) -> TaskOutput:
        return self.model_for(task).forward(batch, task, shared)

    def predict(self, records, task: str, batch_size: int = 512) -> np.ndarray:
        return self.model_for(task).predict(records, task, batch_size)

    def labeled_loss(self, records, labels, task: str) -> Tensor:
        return self.model_for(task).labeled_loss(records, labels, task)

    def to_state(self) -> dict:
        return {"config": self.config.to_json(),
                "members": {t: m.to_state() for t, m in self.models.items()}}

    @classmethod
    def from_state(cls, state: dict) -> "SingleTaskEnsemble":
        return cls(ModelConfig.from_json(state["config"]),
                   models={t: MuViTaNet.from_state(s) for t, s in state["members"].items()})


def _seed_list(seed) -> list[int]:
    if isinstance(seed, (list, tuple)):
        return [int(s) for s in seed]
    return [int(seed)]


def build_variant(config: ModelConfig, seed=0):
    """Instantiate the model wiring for ``config.variant``."""
    if config.single_task:
        return SingleTaskEnsemble(config, seed)
    return MuViTaNet(config, seed)


def model_from_state(state: dict):
    return SingleTaskEnsemble.from_state(state) if "members" in state else MuViTaNet.from_state(state)

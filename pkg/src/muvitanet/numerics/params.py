from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from ..errors import DimensionError, StateError
from .tensor import Tensor

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass
class AdamSlot:
    m: np.ndarray
    v: np.ndarray
    step: int = 0


@dataclass
class ParamStore:
    """Named parameter tensors with gradient slots and Adam moments."""

    tensors: dict[str, Tensor] = field(default_factory=dict)
    adam: dict[str, AdamSlot] = field(default_factory=dict)

    def add(self, name: str, value) -> Tensor:
        if name in self.tensors:
            raise KeyError(f"duplicate parameter {name!r}")
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=True)
        t.zero_grad()
        self.tensors[name] = t
        self.adam[name] = AdamSlot(np.zeros_like(t.data), np.zeros_like(t.data))
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def __len__(self) -> int:
        return len(self.tensors)

    def items(self):
        return self.tensors.items()

    def group(self, prefix: str) -> dict[str, Tensor]:
        """Sub-mapping of parameters under ``prefix.`` with the prefix stripped."""
        head = prefix + "."
        return {k[len(head):]: v for k, v in self.tensors.items() if k.startswith(head)}

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.zero_grad()

    def num_values(self) -> int:
        return sum(t.data.size for t in self.tensors.values())

    def values_copy(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self.tensors.items()}

    def load_values(self, values: dict[str, np.ndarray]) -> None:
        for k, t in self.tensors.items():
            v = np.asarray(values[k], dtype=np.float64)
            if v.shape != t.shape:
                raise DimensionError(f"parameter {k!r}: expected {t.shape}, got {v.shape}")
            t.data = v.copy()

    def to_state(self) -> dict:
        return {
            "params": {k: t.data.tolist() for k, t in self.tensors.items()},
            "adam": {k: {"m": s.m.tolist(), "v": s.v.tolist(), "step": s.step}
                     for k, s in self.adam.items()},
        }

    @classmethod
    def from_state(cls, state: dict) -> "ParamStore":
        store = cls()
        for k, v in state["params"].items():
            store.add(k, v)
        for k, s in state.get("adam", {}).items():
            store.adam[k] = AdamSlot(np.array(s["m"], dtype=np.float64),
                                     np.array(s["v"], dtype=np.float64), int(s["step"]))
        return store


def glorot_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=shape)


def adam_step(params: ParamStore, learning_rate: float) -> None:
    """Bias-corrected Adam update, then zero all gradients.

    A parameter whose gradient is identically zero is left untouched (moments
    and step count included): it took no part in the loss, so e.g. the heads
    of tasks that were not sampled keep their state.
    """
    for name, t in params.tensors.items():
        if t.grad is None:
            raise StateError(f"parameter {name!r} has no gradient slot")
    for name, t in params.tensors.items():
        g = t.grad
        if not np.any(g):
            continue
        s = params.adam[name]
        s.step += 1
        s.m = ADAM_BETA1 * s.m + (1.0 - ADAM_BETA1) * g
        s.v = ADAM_BETA2 * s.v + (1.0 - ADAM_BETA2) * g * g
        m_hat = s.m / (1.0 - ADAM_BETA1 ** s.step)
        v_hat = s.v / (1.0 - ADAM_BETA2 ** s.step)
        t.data = t.data - learning_rate * m_hat / (np.sqrt(v_hat) + ADAM_EPS)
    params.zero_grad()

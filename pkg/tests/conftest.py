import numpy as np
import pytest

from muvitanet.data import PatientRecord, Visit
from muvitanet.encoders import EncoderConfig
from muvitanet.model import ModelConfig, build_variant
from muvitanet.numerics import Tensor


def numeric_grad(f, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of the scalar function f at x."""
    x = np.array(x, dtype=float)
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        orig = x[i]
        x[i] = orig + h
        up = f(x)
        x[i] = orig - h
        down = f(x)
        x[i] = orig
        g[i] = (up - down) / (2 * h)
    return g


def analytic_grad(op, x: np.ndarray, weights: np.ndarray | None = None) -> np.ndarray:
    """Gradient of sum(weights * op(x)) by backprop."""
    t = Tensor(np.array(x, dtype=float), requires_grad=True)
    out = op(t)
    w = np.ones(out.shape) if weights is None else weights
    (out * w).sum().backward()
    return t.grad


def check_op_gradient(op, x, rng, atol=1e-6, rtol=1e-5):
    probe = op(Tensor(np.array(x, dtype=float)))
    w = rng.normal(size=probe.shape)
    got = analytic_grad(op, x, w)
    want = numeric_grad(lambda v: float((op(Tensor(v)).data * w).sum()), x)
    np.testing.assert_allclose(got, want, atol=atol, rtol=rtol)


def random_record(rng: np.random.Generator, vocab_size: int, max_visits: int = 5, max_codes: int = 4,
                  pid: str = "p") -> PatientRecord:
    n = int(rng.integers(1, max_visits + 1))
    t = 0
    visits = []
    for j in range(n):
        t += int(rng.integers(0, 60)) if j else 0
        m = int(rng.integers(1, min(max_codes, vocab_size) + 1))
        visits.append(Visit(tuple(rng.choice(vocab_size, size=m, replace=False).tolist()), t))
    return PatientRecord(pid, int(rng.integers(3)), int(rng.integers(5)), tuple(visits))


def tiny_model(variant="full", vocab_size=12, hidden_dim=4, tasks=("a", "b"), seed=0):
    cfg = ModelConfig(EncoderConfig(vocab_size, hidden_dim), tuple(tasks), variant)
    return build_variant(cfg, seed)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)

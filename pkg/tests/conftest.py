import numpy as np
import pytest

from etd_lab import tensor as tc
from etd_lab.model import ModelConfig, init_params


def numeric_grad(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of scalar f() w.r.t. array x (perturbed in place)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-300)
    return float(np.linalg.norm(a - b) / denom)


def grad_check(build, tensors, h: float = 1e-5) -> float:
    """Worst relative error between tape and finite-difference gradients.

    ``build()`` must return a scalar Tensor computed from ``tensors``.
    """
    for t in tensors:
        t.requires_grad = True
        t.grad = None
    with tc.Tape() as tape:
        loss = build()
        tape.backward(loss)
    worst = 0.0
    for t in tensors:
        num = numeric_grad(lambda: float(build().data), t.data, h)
        worst = max(worst, rel_err(t.grad, num))
    return worst


@pytest.fixture
def toy_config():
    return ModelConfig(vocab_size=16, d_model=8, n_heads=2, d_ff=16, n_layers=3, max_seq_len=8, seed=3)


@pytest.fixture
def toy_params(toy_config):
    return init_params(toy_config)


# acceptance summary: test_acceptance records one outcome per criterion part
ACCEPTANCE: dict[int, list[tuple[bool, str]]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        parts = ACCEPTANCE[n]
        ok = all(p for p, _ in parts)
        detail = "; ".join(d for _, d in parts)
        terminalreporter.write_line(f"CRITERION {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}")

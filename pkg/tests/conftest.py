import numpy as np
import pytest

from madp import ndtensor as nd
from madp.world import WorldConfig


def rel_err(a, b):
    a, b = np.asarray(a), np.asarray(b)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-10)
    return np.linalg.norm(a - b) / denom


def grad_check(loss_fn, tensors, h=1e-5):
    """Largest relative error between analytic and central-difference gradients."""
    for t in tensors:
        t.grad = None
    loss = loss_fn()
    nd.backward(loss)
    worst = 0.0
    for t in tensors:
        num = nd.numerical_grad(loss_fn, t, h)
        ana = t.grad if t.grad is not None else np.zeros_like(t.data)
        worst = max(worst, rel_err(ana, num))
    return worst


@pytest.fixture
def desk():
    return WorldConfig.desk()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])

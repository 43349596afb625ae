import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from trimodal.autodiff import Graph, Tensor

settings.register_profile(
    "default", max_examples=40, deadline=None, derandomize=True, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")


def numeric_grad(fn, arr: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central differences of a plain numpy scalar function, independent of the tape."""
    out = np.zeros_like(arr)
    flat, gflat = arr.reshape(-1), out.reshape(-1)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + h
        fp = float(fn())
        flat[k] = orig - h
        fm = float(fn())
        flat[k] = orig
        gflat[k] = (fp - fm) / (2 * h)
    return out


def tape_grads(build, *tensors):
    """Run ``build`` under a fresh graph, backprop, return each tensor's grad."""
    for t in tensors:
        t.requires_grad = True
        t.grad = None
    with Graph() as g:
        loss = build()
    g.backward(loss)
    return [t.grad for t in tensors]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def rand_tensor(rng, r, c, lo=-1.0, hi=1.0, grad=True):
    return Tensor(rng.uniform(lo, hi, size=(r, c)), requires_grad=grad)


ACCEPTANCE: list[str] = []


@pytest.fixture(scope="session")
def acceptance_report():
    def record(criterion: str, ok: bool, detail: str) -> bool:
        line = f"[{'PASS' if ok else 'FAIL'}] {criterion}: {detail}"
        ACCEPTANCE.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)

import numpy as np
import pytest

from dgd import autodiff as ad


@pytest.fixture(autouse=True)
def _clean_tape():
    ad.get_tape().clear()
    yield
    ad.get_tape().clear()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def finite_diff(fn, leaf, h=1e-5):
    """Central differences of scalar ``fn()`` w.r.t. every entry of ``leaf``."""
    grad = np.zeros_like(leaf.values)
    flat = leaf.values.reshape(-1)
    gflat = grad.reshape(-1)
    with ad.no_grad():
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            up = fn().item()
            flat[i] = old - h
            down = fn().item()
            flat[i] = old
            gflat[i] = (up - down) / (2 * h)
    return grad


def analytic_grad(fn, leaves):
    for p in leaves:
        p.zero_grad()
    ad.backward(fn())
    return [p.grad.copy() for p in leaves]


def rel_err(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b)) / max(1e-8, np.max(np.abs(a)), np.max(np.abs(b))))


def check_grads(fn, leaves, h=1e-5):
    """Largest relative error between backward and finite differences."""
    got = analytic_grad(fn, leaves)
    return max(rel_err(g, finite_diff(fn, p, h)) for g, p in zip(got, leaves))


ACCEPTANCE_LINES = []


@pytest.fixture
def acceptance(capsys):
    """Record (and print) one PASS/FAIL line for an acceptance criterion."""
    def report(number, ok, detail):
        line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES.append(line)
        with capsys.disabled():
            print(f"\n{line}")
        return ok
    return report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split(":")[0].split()[1])):
            terminalreporter.write_line(line)

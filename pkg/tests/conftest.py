import numpy as np
import pytest

from fedftg import autodiff as ad


def numeric_grad(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar function of a float array."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = f(x)
        flat[i] = old - h
        down = f(x)
        flat[i] = old
        gflat[i] = (up - down) / (2 * h)
    return g


def rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """Largest elementwise |a - n| / max(|a|, |n|, floor); the floor absorbs FD round-off on ~0 entries."""
    a, n = np.asarray(analytic), np.asarray(numeric)
    return float(np.max(np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)))


def analytic_grad(build, x: np.ndarray) -> np.ndarray:
    t = ad.Tensor(x, requires_grad=True)
    ad.backward(build(t))
    return t.grad


def check_grad(build, x: np.ndarray, tol: float = 1e-4) -> float:
    """Compare autodiff and FD gradients of ``build(Tensor) -> scalar Tensor`` at ``x``."""
    a = analytic_grad(build, x)
    n = numeric_grad(lambda v: build(ad.Tensor(v)).item(), x)
    err = rel_error(a, n)
    assert err <= tol, f"relative gradient error {err:.3g} > {tol}"
    return err


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, filled by test_acceptance and echoed after the run
ACCEPTANCE_LINES: dict[str, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for key in sorted(ACCEPTANCE_LINES, key=lambda k: int(k)):
            terminalreporter.write_line(ACCEPTANCE_LINES[key])

import numpy as np
import pytest

from ockd import autodiff as ad


def _numerical_grad(f, param, h):
    grad = np.zeros_like(param.data)
    flat = param.data.reshape(-1)
    out = grad.reshape(-1)
    with ad.no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = float(f().data)
            flat[i] = orig - h
            down = float(f().data)
            flat[i] = orig
            out[i] = (up - down) / (2 * h)
    return grad


def max_rel_error(f, params, h=1e-5, floor=1e-8):
    """Largest |analytic - central difference| / max(|numeric|, |analytic|, floor)."""
    for p in params:
        p.grad = None
    f().backward()
    worst = 0.0
    for p in params:
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad
        numeric = _numerical_grad(f, p, h)
        denom = np.maximum(np.maximum(np.abs(numeric), np.abs(analytic)), floor)
        worst = max(worst, float(np.max(np.abs(analytic - numeric) / denom)))
    return worst


@pytest.fixture
def gradcheck():
    return max_rel_error


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_KEY = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[ACCEPTANCE_KEY] = {}


@pytest.fixture
def acceptance(request):
    """Record one result line per acceptance criterion."""
    lines = request.config.stash[ACCEPTANCE_KEY]

    def record(number, passed, detail):
        lines[number] = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}"
        assert passed, lines[number]

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(ACCEPTANCE_KEY, {})
    if lines:
        terminalreporter.section("acceptance")
        for number in sorted(lines):
            terminalreporter.write_line(lines[number])

import numpy as np
import pytest

ACCEPTANCE_LINES: list[str] = []


def central_difference(f, param, eps=1e-5):
    """d f / d param by central differences, perturbing ``param.values`` in place."""
    grad = np.zeros_like(param.values)
    it = np.nditer(param.values, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = param.values[idx]
        param.values[idx] = orig + eps
        hi = f()
        param.values[idx] = orig - eps
        lo = f()
        param.values[idx] = orig
        grad[idx] = (hi - lo) / (2 * eps)
    return grad


def max_rel_error(analytic, numeric, floor=1e-6):
    analytic, numeric = np.asarray(analytic), np.asarray(numeric)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)

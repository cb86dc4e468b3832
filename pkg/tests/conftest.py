from __future__ import annotations

import os
from typing import Callable

import numpy as np
import pytest

os.environ.setdefault("OMP_NUM_THREADS", "1")
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")


def central_difference(f: Callable[[], float], array: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Numerical gradient of scalar ``f()`` w.r.t. ``array`` (perturbed in place)."""
    grad = np.zeros_like(array)
    it = np.nditer(array, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = array[idx]
        array[idx] = old + step
        up = f()
        array[idx] = old - step
        down = f()
        array[idx] = old
        grad[idx] = (up - down) / (2 * step)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(np.abs(analytic).max(), np.abs(numeric).max(), 1e-8)
    return float(np.abs(analytic - numeric).max() / scale)


def gradient_error(f: Callable[[], float], tensors) -> float:
    """Worst analytic-vs-numeric gap over ``tensors``, relative to the largest gradient entry.

    A shared scale keeps inputs whose true gradient is zero (e.g. key biases
    under softmax shift invariance) from turning rounding noise into failures.
    """
    pairs = [(t.grad, central_difference(f, t.values)) for t in tensors]
    scale = max(max(np.abs(a).max(), np.abs(n).max()) for a, n in pairs)
    scale = max(scale, 1e-8)
    return max(float(np.abs(a - n).max()) for a, n in pairs) / scale


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[n])

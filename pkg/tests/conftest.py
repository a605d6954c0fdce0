import numpy as np
import pytest

from cdn.tensor import Tensor


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def naive_conv2d(x, w, b):
    """Direct sliding-window convolution with zero padding k // 2 (float64)."""
    n, ci, h, wd = x.shape
    co, _, k, _ = w.shape
    p = k // 2
    xp = np.zeros((n, ci, h + 2 * p, wd + 2 * p))
    xp[:, :, p:p + h, p:p + wd] = x
    out = np.zeros((n, co, h, wd))
    for b_ in range(n):
        for o in range(co):
            for i in range(h):
                for j in range(wd):
                    out[b_, o, i, j] = np.sum(xp[b_, :, i:i + k, j:j + k] * w[o]) + b[o]
    return out


def leaf(arr, dtype=np.float64):
    return Tensor(np.asarray(arr, dtype=dtype), requires_grad=True, dtype=dtype)


ACCEPTANCE: list[tuple[str, bool, str]] = []


@pytest.fixture
def criterion():
    """Record one acceptance line: ``criterion(name, passed, detail)``."""

    def record(name: str, passed: bool, detail: str = "") -> bool:
        ACCEPTANCE.append((name, bool(passed), detail))
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, passed, detail in ACCEPTANCE:
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'}  {name}  {detail}")

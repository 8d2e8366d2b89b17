from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
import pytest

from dsem_lab.tensor import Tensor


def numeric_grad(f: Callable[[list[np.ndarray]], float], arrays: list[np.ndarray], step: float = 1e-4) -> list[np.ndarray]:
    """Central differences of a scalar function of several float64 arrays."""
    grads = []
    for a in arrays:
        g = np.zeros_like(a)
        it = np.nditer(a, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            orig = a[idx]
            a[idx] = orig + step
            fp = f(arrays)
            a[idx] = orig - step
            fm = f(arrays)
            a[idx] = orig
            g[idx] = (fp - fm) / (2 * step)
        grads.append(g)
    return grads


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    num = np.linalg.norm(analytic - numeric)
    den = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-12)
    return float(num / den)


def gradcheck(
    op: Callable[..., Tensor],
    inputs: Sequence[np.ndarray],
    rng: np.random.Generator,
    step: float = 1e-4,
) -> float:
    """Max relative error between backprop and finite differences of
    sum(op(*inputs) * R) for a fixed random projection R."""
    arrays = [np.array(x, dtype=np.float64) for x in inputs]
    probe = None

    def scalar(arrs):
        nonlocal probe
        out = op(*[Tensor(a) for a in arrs]).data
        if probe is None:
            probe = rng.uniform(-1, 1, size=out.shape)
        return float((out * probe).sum())

    scalar(arrays)
    tensors = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = op(*tensors)
    out.backward(probe.astype(np.float64))
    numeric = numeric_grad(scalar, arrays, step)
    return max(rel_error(t.grad, n) for t, n in zip(tensors, numeric))


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


# one verdict line per acceptance criterion, printed after the test summary
VERDICTS: dict[int, str] = {}


def record_verdict(number: int, title: str, ok: bool, detail: str) -> None:
    VERDICTS[number] = f"[{number:>2}] {'PASS' if ok else 'FAIL'}  {title}: {detail}"


def pytest_terminal_summary(terminalreporter):
    if not VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(VERDICTS):
        terminalreporter.write_line(VERDICTS[n])

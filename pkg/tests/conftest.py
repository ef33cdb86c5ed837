import numpy as np
import pytest

from aabcos.tensor import Tensor

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def numeric_grad(f, x: np.ndarray, step: float = 1e-4) -> np.ndarray:
    """Central finite differences of scalar ``f`` at float64 ``x``."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + step
        fp = f(x)
        x[i] = old - step
        fm = f(x)
        x[i] = old
        g[i] = (fp - fm) / (2 * step)
    return g


def rel_err(a, b) -> float:
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-12))


def check_grads(op, *arrays, seed=0, step=1e-4):
    """Compare autodiff gradients of ``sum(op(*tensors) * R)`` to finite differences."""
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    out_shape = op(*[Tensor(a, dtype=np.float64) for a in arrays]).shape
    proj = np.random.default_rng(seed + 999).standard_normal(out_shape)

    def scalar(*arrs):
        return float((op(*[Tensor(a, dtype=np.float64) for a in arrs]).data * proj).sum())

    tensors = [Tensor(a, requires_grad=True, dtype=np.float64) for a in arrays]
    out = op(*tensors)
    (out * Tensor(proj, dtype=np.float64)).sum().backward()
    errs = []
    for k, t in enumerate(tensors):
        def f(v, k=k):
            arrs = list(arrays)
            arrs[k] = v
            return scalar(*arrs)
        errs.append(rel_err(t.grad, numeric_grad(f, arrays[k].copy(), step)))
    return max(errs)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)

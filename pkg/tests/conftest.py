import numpy as np
import pytest

from m2restore.gradcheck import check_gradients
from m2restore.tensor import Tensor, using_dtype

PRIMITIVE_TOL = 1e-4
END_TO_END_TOL = 1e-3


@pytest.fixture
def f64():
    with using_dtype(np.float64):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def leaf(a, grad=True):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


def assert_grads(fn, params, tol=PRIMITIVE_TOL):
    errs = check_gradients(fn, params)
    worst = max(errs.values()) if errs else 0.0
    assert worst <= tol, f"gradient relative errors {errs}"
    return worst


# acceptance verdicts, echoed once more at the end of the run
ACCEPTANCE: dict = {}


def record(criterion: int, ok: bool, detail: str) -> None:
    line = f"criterion {criterion:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE[criterion] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[k])

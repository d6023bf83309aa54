import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from seqlink import diffcore as dc

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def numeric_grad(fn, arrays, eps=1e-5):
    """Central differences of the scalar ``fn()`` w.r.t. each array's data, in place."""
    grads = []
    for a in arrays:
        g = np.zeros_like(a.data)
        it = np.nditer(a.data, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            old = a.data[i]
            a.data[i] = old + eps
            up = fn()
            a.data[i] = old - eps
            down = fn()
            a.data[i] = old
            g[i] = (up - down) / (2 * eps)
        grads.append(g)
    return grads


def rel_error(a, b):
    a, b = np.ravel(a), np.ravel(b)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-8)
    return float(np.linalg.norm(a - b) / scale)


def analytic_grad(loss_fn, arrays):
    for a in arrays:
        a.zero_grad()
    with dc.Tape() as tape:
        out = loss_fn()
    tape.backward(out)
    return [a.grad.copy() for a in arrays]


def check_store_gradients(store, loss_fn, names=None):
    """Largest relative error over every parameter in ``store``."""
    params = [store[n] for n in (names or list(store))]
    store.zero_grad()
    analytic = analytic_grad(loss_fn, params)
    numeric = numeric_grad(lambda: float(loss_fn().data), params)
    return {p.name: rel_error(a, n) for p, a, n in zip(params, analytic, numeric)}


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# acceptance summary: one line per criterion, printed after the run ---------------------

_CRITERIA: dict[str, tuple[str, str]] = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py::test_criterion_" not in report.nodeid:
        return
    if report.when == "call" or (report.when == "setup" and report.failed):
        detail = dict(report.user_properties).get("detail", "")
        _CRITERIA[report.nodeid] = ("PASS" if report.passed else "FAIL", detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for nodeid, (status, detail) in sorted(_CRITERIA.items()):
        name = nodeid.split("::")[-1].removeprefix("test_")
        terminalreporter.write_line(f"{status}  {name}  {detail}".rstrip())

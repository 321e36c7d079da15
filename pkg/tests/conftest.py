import numpy as np
import pytest

from jointsnn import autodiff as ad
from jointsnn.autodiff import Tensor


def numeric_grad(f, arrays, eps=1e-6):
    """Central finite differences of the scalar ``f(*arrays)`` w.r.t. each array."""
    grads = []
    for a in arrays:
        g = np.zeros_like(a)
        it = np.nditer(a, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            old = a[i]
            a[i] = old + eps
            hi = f(*arrays)
            a[i] = old - eps
            lo = f(*arrays)
            a[i] = old
            g[i] = (hi - lo) / (2 * eps)
        grads.append(g)
    return grads


def tape_grad(build, arrays):
    """Analytic gradients of the scalar tensor ``build(*tensors)``."""
    ts = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    with ad.Tape() as tape:
        out = build(*ts)
    tape.backward(out)
    return [t.grad for t in ts]


def rel_err(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-12))


def gradcheck(build, arrays, eps=1e-6):
    """Max relative error between tape and finite-difference gradients."""
    analytic = tape_grad(build, arrays)
    numeric = numeric_grad(lambda *xs: float(build(*[Tensor(x) for x in xs]).data), arrays, eps)
    return max(rel_err(a, n) for a, n in zip(analytic, numeric))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# --------------------------------------------------------------------------
# acceptance reporting: one PASS/FAIL line per criterion in the terminal summary

_criteria: dict = {}
_notes: list = []


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    number, title = mark.args
    entry = _criteria.setdefault(number, {"title": title, "ok": True, "tests": 0})
    if rep.when == "call":
        entry["tests"] += 1
    if rep.failed or (rep.when == "setup" and rep.skipped):
        entry["ok"] = False


@pytest.fixture
def acceptance_note():
    """Append a line to the acceptance summary (used for the ablation table)."""
    return _notes.append


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        e = _criteria[number]
        verdict = "PASS" if e["ok"] else "FAIL"
        terminalreporter.write_line(f"criterion {number}: {verdict}  {e['title']} ({e['tests']} tests)")
    for line in _notes:
        terminalreporter.write_line(line)

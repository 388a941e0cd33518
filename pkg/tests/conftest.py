import itertools

import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def gaussian_groups(n_groups, g=128, sigma=0.02, seed=0):
    return np.random.default_rng(seed).normal(0.0, sigma, size=(n_groups, g)).astype(np.float32)


def brute_assign(values, candidates):
    """Nearest candidate index by explicit scan; first minimum wins."""
    best, best_d = 0, None
    for m, v in enumerate(candidates):
        d = abs(float(values) - float(v))
        if best_d is None or d < best_d:
            best, best_d = m, d
    return best


def brute_rtn(w, q):
    """Scalar loop version of group RTN for one group."""
    lo, hi = min(w), max(w)
    qmax = 2**q - 1
    s = (hi - lo) / qmax if hi != lo else 1.0
    z = min(max(round(-lo / s), 0), qmax)
    out = []
    for v in w:
        wi = min(max(round(v / s) + z, 0), qmax)
        out.append((wi - z) * s)
    return out


def all_sign_patterns(n):
    return list(itertools.product((-1, 1), repeat=n))


_ACCEPTANCE_LINES = []


@pytest.fixture
def criterion(request):
    """Record one PASS/FAIL line for an acceptance criterion.

    The test calls ``criterion(number, title)`` to get a recorder; the line is
    written with the test outcome and whatever detail was attached.
    """
    state = {}

    def start(number, title):
        state.update(number=number, title=title, detail="")

        def note(text):
            state["detail"] = text

        return note

    yield start
    if state:
        rep = getattr(request.node, "rep_call", None)
        ok = rep is not None and rep.passed
        _ACCEPTANCE_LINES.append(
            (state["number"], f"{'PASS' if ok else 'FAIL'} criterion {state['number']:>2}: "
                              f"{state['title']} {state['detail']}".rstrip())
        )


@pytest.hookimpl(hookwrapper=True, tryfirst=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    if rep.when == "call":
        item.rep_call = rep


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(_ACCEPTANCE_LINES):
        terminalreporter.write_line(line)

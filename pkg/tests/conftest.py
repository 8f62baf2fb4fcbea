import numpy as np
import pytest

from locclab.decomp import is_irreducible
from locclab.qstate import Party, PureState, RegisterLayout, random_state, tensor, permute_parties

# criterion number -> (description, passed, detail)
CRITERIA: dict[int, tuple[str, bool, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, text): acceptance criterion n")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or (rep.when != "call" and not rep.failed):
        return
    detail = "; ".join(f"{k}={v}" for k, v in item.user_properties)
    if rep.failed and rep.when == "call":
        detail = (detail + "; " if detail else "") + str(rep.longrepr.reprcrash.message if hasattr(rep.longrepr, "reprcrash") else "failed")[:200]
    CRITERIA[mark.args[0]] = (mark.args[1], rep.passed, detail)


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        text, ok, detail = CRITERIA[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {text}  [{detail}]")


def layout_of(dims, names=None):
    names = names or [chr(ord("A") + i) for i in range(len(dims))]
    return RegisterLayout(tuple(Party(n, (d,)) for n, d in zip(names, dims)))


def random_entangled(rng, dims):
    """Haar state on one qudit per party, redrawn until it is factorizable across no cut."""
    layout = layout_of(dims)
    while True:
        s = random_state(layout, rng)
        if is_irreducible(s):
            return s


def random_factorizable(rng, dims):
    """Product of two Haar states on a random proper split; returns (state, left side)."""
    m = len(dims)
    k = int(rng.integers(1, m))
    side = sorted(rng.choice(m, size=k, replace=False).tolist())
    other = [i for i in range(m) if i not in side]
    names = [chr(ord("A") + i) for i in range(m)]
    a = random_state(layout_of([dims[i] for i in side], [names[i] for i in side]), rng)
    b = random_state(layout_of([dims[i] for i in other], [names[i] for i in other]), rng)
    joint = tensor(a, b)
    order = [(side + other).index(i) for i in range(m)]
    return permute_parties(joint, order), side


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


def amp_state(vec, dims=None):
    from locclab.qstate import from_vector

    return from_vector(np.asarray(vec, dtype=complex), dims=dims)


__all__ = ["layout_of", "random_entangled", "random_factorizable", "amp_state", "PureState"]

import numpy as np
import pytest

from curvetrack import kinematics as kin
from curvetrack import redundancy as rd
from curvetrack.curves import Curve, gen_curve1, gen_curve2_analogue, transform_curve


@pytest.fixture(scope="session")
def model():
    return kin.load_model()


def line_curve(length=400.0, n=401, axis=0):
    p = np.zeros((n, 3))
    p[:, axis] = np.linspace(0.0, length, n)
    return Curve(p, np.tile([0.0, 0.0, 1.0], (n, 1)))


def random_q(model, rng, n=1, margin=0.05):
    lo = model.q_min + margin
    hi = model.q_max - margin
    return lo + rng.random((n, 6)) * (hi - lo)


@pytest.fixture(scope="session")
def curve1():
    return gen_curve1()


@pytest.fixture(scope="session")
def curve2():
    return gen_curve2_analogue()


@pytest.fixture(scope="session")
def baseline1(model, curve1):
    pose, path, branch = rd.baseline_resolve(curve1, model)
    return transform_curve(curve1, pose), path, pose, branch


@pytest.fixture(scope="session")
def placed_line(model):
    """A 400 mm straight curve placed by the baseline rule, with its joint path."""
    c0 = line_curve()
    pose, path, _ = rd.baseline_resolve(c0, model)
    return transform_curve(c0, pose), path


# ---------------------------------------------------------------------------
# acceptance summary: one pass/fail line per criterion


_CRITERIA = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    rep = (yield).get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    number, title = mark.args
    entry = _CRITERIA.setdefault(number, {"title": title, "ok": True, "notes": []})
    if rep.failed or (rep.when == "call" and not rep.passed):
        entry["ok"] = False
    if rep.when == "call":
        entry["notes"] += [f"{k}={v}" for k, v in item.user_properties]


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        e = _CRITERIA[number]
        line = f"criterion {number}: {'PASS' if e['ok'] else 'FAIL'}  {e['title']}"
        if e["notes"]:
            line += "  [" + ", ".join(e["notes"]) + "]"
        terminalreporter.write_line(line)

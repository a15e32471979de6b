import warnings

import numpy as np
import pytest

from narxdecouple.narx import DecoupledNarxModel, NarxStructure, fit_pnarx
from narxdecouple.signals import LabConfig, generate_training, generate_validation


def random_decoupled(r, seed, structure=NarxStructure(1, 3, 3), constant=True):
    """Exact decoupled cubic with ``r`` random directions."""
    rng = np.random.default_rng(seed)
    V = rng.standard_normal((structure.n_vars, r))
    C = rng.standard_normal((r, structure.degree + 1))
    if not constant:
        C[:, 0] = 0.0
    return DecoupledNarxModel.from_raw(structure, V, C)


@pytest.fixture(scope="session")
def lab():
    """Default benchmark: training, validation and the reference P-NARX."""
    cfg = LabConfig()
    training = generate_training(cfg)
    validation = generate_validation(cfg)
    ref = fit_pnarx([r.u for r in training], [r.y for r in training])
    return {"cfg": cfg, "training": training, "validation": validation, "ref": ref}


@pytest.fixture(autouse=True)
def _quiet_jitter_warnings():
    with warnings.catch_warnings():
        warnings.filterwarnings("ignore", message="near-coincident projections")
        yield


# ---------------------------------------------------------------- acceptance report

_OUTCOMES = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


@pytest.fixture
def detail(request):
    """Attach a one-line summary to the criterion reported for this test."""
    notes = []
    request.node._criterion_notes = notes
    return notes.append


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or (rep.when != "call" and rep.passed):
        return
    number, title = mark.args
    passed = rep.passed and _OUTCOMES.get(number, (True,))[0]
    notes = "; ".join(getattr(item, "_criterion_notes", []))
    if rep.failed and rep.when != "call":
        notes = f"{rep.when} error"
    _OUTCOMES[number] = (passed, title, notes)


def pytest_terminal_summary(terminalreporter):
    if not _OUTCOMES:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_OUTCOMES):
        passed, title, notes = _OUTCOMES[number]
        line = f"criterion {number:2d} {'PASS' if passed else 'FAIL'}  {title}"
        terminalreporter.write_line(line + (f"  ({notes})" if notes else ""))

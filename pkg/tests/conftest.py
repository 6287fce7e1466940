import numpy as np
import pytest

from hyperfe2 import materials as M
from hyperfe2 import meshgen, rom, rve


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running desk-scale runs")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def porous_materials(E=1.0):
    """Matrix/inclusion pair with the relative properties of the desk problem."""
    return {0: M.J2Plasticity(E, 0.3, 0.01 * E, 0.016 * E), 1: M.LinearElastic(10 * E, 0.3)}


@pytest.fixture(scope="session")
def small_micro():
    """64-element porous tri3 RVE, J2 matrix with elastic inclusions."""
    return rve.MicroModel(meshgen.rve_with_pore(n=6, etype="tri3"), porous_materials())


@pytest.fixture(scope="session")
def small_basis(small_micro):
    mod = small_micro
    path = rve.LoadPath(np.linspace(0, 1, 7), np.outer(np.linspace(0, 1, 7), [0.03, -0.01, 0.02]))
    path2 = rve.LoadPath(np.linspace(0, 1, 7), np.outer(np.linspace(0, 1, 7), [-0.01, 0.025, -0.015]))
    cols = [s.q for p in (path, path2) for s in rve.run_path(mod, p)]
    return rom.pod(rom.SnapshotMatrix.from_columns(cols), n_modes=6)


# acceptance criteria report: one line per criterion in the terminal summary
ACCEPTANCE_IDS = [str(i) for i in range(1, 12)]
_acceptance: dict = {}


@pytest.fixture
def criterion():
    """``criterion(number, ok, detail)`` records one acceptance result."""
    def record(number, ok, detail=""):
        key = str(number)
        prev = _acceptance.get(key)
        ok = bool(ok) and (prev is None or prev[0])
        detail = detail if prev is None else f"{prev[1]}; {detail}"
        _acceptance[key] = (ok, detail)
        print(f"criterion {key}: {'PASS' if ok else 'FAIL'}  {detail}")
    return record


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    terminalreporter.section("acceptance criteria")
    for key in ACCEPTANCE_IDS:
        if key in _acceptance:
            ok, detail = _acceptance[key]
            terminalreporter.write_line(f"criterion {key:>2s}: {'PASS' if ok else 'FAIL'}  {detail}")
        else:
            terminalreporter.write_line(f"criterion {key:>2s}: NOT RUN")

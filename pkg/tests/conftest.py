import numpy as np
import pytest

from drillsim.dynamics import ReducedDynamics
from drillsim.fem import assemble_constant_system, build_mesh
from drillsim.integrate import static_equilibrium
from drillsim.modal import reduced_model
from drillsim.params import BeamModel


@pytest.fixture(scope="session")
def model():
    return BeamModel()


@pytest.fixture(scope="session")
def system100(model):
    return assemble_constant_system(build_mesh(100.0, 500), model)


@pytest.fixture(scope="session")
def reduced100(system100):
    """(mode table, reduced system) for the nominal 100 m string."""
    return reduced_model(system100)


@pytest.fixture(scope="session")
def dyn100(reduced100, model):
    return ReducedDynamics(reduced100[1], model)


@pytest.fixture(scope="session")
def static100(dyn100):
    return static_equilibrium(dyn100)


@pytest.fixture(scope="session")
def small_model():
    """20 m string on a coarse mesh, for fast integrator tests."""
    return BeamModel.from_dict({"geometry": {"L": 20.0}})


@pytest.fixture(scope="session")
def small_reduced(small_model):
    system = assemble_constant_system(build_mesh(20.0, 40), small_model)
    return reduced_model(system, flex_cutoff_hz=60.0)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# ---------------------------------------------------------------- acceptance log
_CRITERIA: dict[int, list[tuple[bool, str]]] = {}


@pytest.fixture(scope="session")
def criterion():
    """``criterion(n, ok, detail)`` records one check towards acceptance criterion ``n``."""

    def record(n: int, ok: bool, detail: str) -> bool:
        _CRITERIA.setdefault(n, []).append((bool(ok), detail))
        return bool(ok)

    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        checks = _CRITERIA[n]
        verdict = "PASS" if all(ok for ok, _ in checks) else "FAIL"
        details = "; ".join(d if ok else f"{d} [miss]" for ok, d in checks)
        terminalreporter.write_line(f"CRITERION {n}: {verdict}  {details}")

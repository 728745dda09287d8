import numpy as np
import pytest

from swe4dvar.adi import AdiConfig, SweModel
from swe4dvar.swe import PhysicalConstants, build_grid, grammeltvedt_initial_state


def make_model(nx, ny, nt, t_final=None, **kw):
    cfg = AdiConfig.from_window(t_final if t_final is not None else 120.0 * (nt - 1), nt, **kw)
    return SweModel(build_grid(nx, ny), PhysicalConstants(), cfg)


def initial_state(model):
    return model.space.close(grammeltvedt_initial_state(model.grid, model.constants, model.ops).flat)


@pytest.fixture(scope="session")
def tiny_model():
    return make_model(9, 7, 6)


@pytest.fixture(scope="session")
def small_model():
    """17 x 13 mesh, ten time levels."""
    return make_model(17, 13, 10)


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(1234)


# one verdict line per acceptance criterion, echoed again in the terminal summary
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip("]"))):
            terminalreporter.write_line(line)

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from amfem.elements import ElementFamily, Family
from amfem.mesh import generate_lshape, generate_unit_square, refine

settings.register_profile(
    "amfem", deadline=None, suppress_health_check=[HealthCheck.too_slow], print_blob=True
)
settings.load_profile("amfem")

ALL_ELEMENTS = [ElementFamily(Family.RT, 0), ElementFamily(Family.BDM, 0),
                ElementFamily(Family.RT, 1), ElementFamily(Family.BDM, 1)]


def element_id(el):
    return str(el)


@pytest.fixture
def square1():
    return generate_unit_square(1)


@pytest.fixture
def graded_mesh():
    """A small locally refined L-shape mesh (non-uniform, mixed generations)."""
    m = generate_lshape(1)
    m = refine(m, [0, 3])
    m = refine(m, [1, 5, 7], rule="bisec3")
    return m


def random_field(rng, n):
    return rng.standard_normal(n)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_KEY = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[ACCEPTANCE_KEY] = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


@pytest.fixture
def acceptance(request):
    """Record one PASS/FAIL line for a criterion, print it, and assert it."""

    def record(number: int, passed: bool, detail: str):
        line = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}"
        request.config.stash[ACCEPTANCE_KEY].append(line)
        print(line)
        assert passed, line

    return record

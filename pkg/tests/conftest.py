import numpy as np
import pytest

from dirsynth.grid import LabelMap, Volume
from dirsynth.phantom import DeformationSpec, PhantomSpec, generate


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_spec():
    return PhantomSpec(dims=(32, 32, 32), seed=3, deformation=DeformationSpec(6.0, 3.0))


@pytest.fixture(scope="session")
def small_phantom(small_spec):
    return generate(small_spec)


def random_volume(rng, dims=(8, 8, 8), **kw):
    return Volume(rng.random(dims), **kw)


def random_labels(rng, dims=(8, 8, 8), n=4):
    return LabelMap(rng.integers(0, n, dims))


def pytest_terminal_summary(terminalreporter):
    """Repeat the acceptance verdicts, one line per criterion, at the end of the run."""
    import sys

    module = sys.modules.get("test_acceptance")
    results = getattr(module, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for number in sorted(results):
            terminalreporter.write_line(results[number])

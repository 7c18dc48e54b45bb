import itertools

import numpy as np
import pytest

from promises.data import Cohort, VoxelCoordinates
from promises.prior import build_location_matrix


def random_cohort(rng, m, t, v, coords=True):
    arrays = [rng.standard_normal((t, v)) for _ in range(m)]
    xyz = None
    if coords:
        # distinct points on a line-ish lattice so the Euclidean prior is full rank
        xyz = VoxelCoordinates(np.array(list(itertools.islice(itertools.product(range(v), range(2), range(1)), v)),
                                        dtype=float))
    return Cohort.from_arrays(arrays, coords=xyz)


def rot2(theta):
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s], [s, c]])


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def small_cohort(rng):
    return random_cohort(rng, 4, 12, 6)


@pytest.fixture
def small_prior(small_cohort):
    return build_location_matrix(small_cohort.coords)


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for number in sorted(results):
            terminalreporter.write_line(results[number])

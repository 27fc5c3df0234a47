import numpy as np
import pytest

from ppakit.background import flat_background, make_group
from ppakit.lattice import build_lattice


@pytest.fixture(scope="session")
def lat8():
    return build_lattice(12, 8, 0.05, 0.1)


@pytest.fixture(scope="session")
def bg_u1(lat8):
    return flat_background(lat8, make_group("U1"), mass=0.35)


@pytest.fixture(scope="session")
def bg_su2(lat8):
    return flat_background(lat8, make_group("SU2"), mass=0.35)


@pytest.fixture()
def rng():
    return np.random.default_rng(42)

import numpy as np
import pytest

from dalab.linear import build_An, build_theoremC_matrix, solve_spectrum
from dalab.perturb import compose_da, make_center_booster


@pytest.fixture(scope="session")
def frame100():
    return solve_spectrum(build_An(100))


@pytest.fixture(scope="session")
def frameC():
    return solve_spectrum(build_theoremC_matrix())


@pytest.fixture(scope="session")
def linear100(frame100):
    return compose_da(frame100.matrix, [], frame100, name="A100")


@pytest.fixture(scope="session")
def boosted100(frame100):
    """Centre booster at the default strength, no localized bump."""
    return compose_da(frame100.matrix, [make_center_booster(frame100, 0.042)], frame100, name="H100")


@pytest.fixture(scope="session")
def modelC(frameC):
    return compose_da(frameC.matrix, [make_center_booster(frameC, 0.015, mix_c1=0.5)], frameC, name="thmC")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)

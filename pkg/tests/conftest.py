import logging

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "cardioflow", deadline=None, max_examples=25,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture],
)
settings.load_profile("cardioflow")


@pytest.fixture(autouse=True)
def _quiet_cfl(caplog):
    caplog.set_level(logging.ERROR, logger="cardioflow.fluid")


@pytest.fixture
def unit_square():
    from cardioflow.mesh import generate_box_mesh

    return generate_box_mesh(2, [1.0, 1.0], [6, 5])


@pytest.fixture
def unit_cube():
    from cardioflow.mesh import generate_box_mesh

    return generate_box_mesh(3, [1.0, 1.0, 1.0], [3, 3, 3])


@pytest.fixture
def rng():
    return np.random.default_rng(1234)

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def blender2():
    from qcblender.blender import build_affine_blender
    return build_affine_blender(2)


@pytest.fixture(scope="session")
def tuned2():
    from qcblender.covering import auto_tune_parameters, build_simplex_generators
    t, r, cert = auto_tune_parameters(2, (0.05, 0.5), (0.05, 0.5), 41)
    gens, region = build_simplex_generators(2, t, r)
    return gens, region, cert


def rng(seed=0):
    return np.random.default_rng(seed)

import warnings

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from bimodal_stereo.synth import face_surface, standard_lighting

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(autouse=True)
def _quiet_convergence():
    from bimodal_stereo.sfs import ConvergenceWarning

    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ConvergenceWarning)
        yield


@pytest.fixture(scope="session")
def face():
    return face_surface()


@pytest.fixture(scope="session")
def lighting():
    return standard_lighting()


def random_unit(rng, n=None, camera_facing=True):
    v = rng.normal(size=(3,) if n is None else (n, 3))
    v /= np.linalg.norm(v, axis=-1, keepdims=True)
    if camera_facing:
        v[..., 2] = np.abs(v[..., 2])
    return v

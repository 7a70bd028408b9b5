import numpy as np
import pytest

from fusionpt import SceneConfig, generate_scene


SMALL_SCENE = SceneConfig(n_objects=3, points_per_object=120,
                          dense_samples_per_object=600, image_width=80,
                          image_height=60, focal=60.0, feature_stride=4,
                          feature_dim=12)


@pytest.fixture(scope="session")
def small_scene():
    return generate_scene(11, SMALL_SCENE)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_rotation(rng):
    """Uniform-ish random rotation via QR of a Gaussian matrix."""
    q, r = np.linalg.qr(rng.standard_normal((3, 3)))
    q *= np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q

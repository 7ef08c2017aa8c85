import numpy as np
import pytest

from netref.model import ModelConfig
from phantom import PhantomSpec, generate_phantom
from voxelgrid import MultiModalVolume


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_model():
    return ModelConfig(base_filters=2, feature_size=2)


@pytest.fixture(scope='session')
def small_phantom():
    """16^3 phantom: core radius 2, edema radius 3, brain radius 7"""
    spec = PhantomSpec(
        dims=(16, 16, 16),
        center_mm=(7.5, 7.5, 7.5),
        core_radii_mm=(2.5, 2.5, 2.5),
        edema_radii_mm=(3.5, 3.5, 3.5),
        brain_radii_mm=(7.0, 7.0, 7.0),
    )
    return generate_phantom(spec)


@pytest.fixture(scope='session')
def offset_phantom():
    """64^3 phantom with the tumor off-centre so all three risk zones are present"""
    spec = PhantomSpec(
        dims=(64, 64, 64),
        center_mm=(31.5, 31.5, 18.0),
        core_radii_mm=(6.0, 6.0, 6.0),
        edema_radii_mm=(8.0, 8.0, 8.0),
        brain_radii_mm=(30.0, 30.0, 30.0),
    )
    return generate_phantom(spec)


def random_volume(rng, dims, spacing=(1.0, 1.0, 1.0)):
    return MultiModalVolume.from_array(rng.standard_normal((4,) + tuple(dims)), spacing)

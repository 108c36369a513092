import numpy as np
import pytest

from scooplab.env import EnvAction, EnvConfig, EnvObservation, GranularEnv


@pytest.fixture
def env():
    return GranularEnv(EnvConfig())


def tiny_obs(rng: np.random.Generator, shape=(4, 4)) -> EnvObservation:
    """Small observation with image values on the storable k/255 grid."""
    img = rng.integers(0, 256, size=shape).astype(np.float32) / 255.0
    pose = rng.uniform(-1.0, 1.0, size=4).astype(np.float32)
    return EnvObservation(image=img, pose=pose)


def tiny_action(rng: np.random.Generator) -> EnvAction:
    return EnvAction(*(float(v) for v in rng.uniform(-1.0, 1.0, size=3)))


def obs_equal(a: EnvObservation, b: EnvObservation) -> bool:
    return np.array_equal(a.image, b.image) and np.array_equal(a.pose, b.pose)

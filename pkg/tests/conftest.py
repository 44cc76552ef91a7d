import numpy as np
import pytest

from config.settings import BenchmarkSpec, ModelSpec, RunConfig, SceneInitSpec
from src.diffusion.schedule import build_schedule
from src.diffusion.score_models import ConditionId, GaussianMixture, MixtureScoreModel
from src.splatting.camera import image_plane_camera, orbit_camera
from src.splatting.scene import random_scene


@pytest.fixture
def schedule():
    return build_schedule("linear", 1000, 1e-4, 0.02)


@pytest.fixture
def rng():
    return np.random.default_rng(7)


@pytest.fixture
def unit_gaussian():
    return GaussianMixture(weights=[1.0], means=[[0.0, 0.0]], sigmas=[1.0])


@pytest.fixture
def three_mode_mixture():
    """Three 2D components; condition 0 owns the first, condition 1 the other two."""
    return GaussianMixture(
        weights=[0.5, 0.3, 0.2],
        means=[[1.0, 0.5], [-1.2, 0.3], [0.2, -1.5]],
        sigmas=[0.4, 0.6, 0.3],
        condition_map={ConditionId(id=0): (0,), ConditionId(id=1): (1, 2), ConditionId(id=2): (2,)},
    )


@pytest.fixture
def oracle(three_mode_mixture, schedule):
    return MixtureScoreModel(three_mode_mixture, schedule)


@pytest.fixture
def camera_2d():
    return image_plane_camera((8, 8))


@pytest.fixture
def camera_3d():
    return orbit_camera(0.4, 0.2, 4.0, (8, 8))


@pytest.fixture
def scene_2d(rng):
    return random_scene(5, 2, rng)


@pytest.fixture
def image_mixture(rng, camera_2d, scene_2d, schedule):
    """Mixture over flattened 8x8 renders: condition 0 is a fixed target image."""
    from src.splatting.renderer import render

    target = render(random_scene(5, 2, np.random.default_rng(99)), camera_2d).flat()
    other = render(random_scene(5, 2, np.random.default_rng(98)), camera_2d).flat()
    mixture = GaussianMixture(
        weights=[0.5, 0.5],
        means=[target, other],
        sigmas=[0.05, 0.05],
        condition_map={ConditionId(id=0): (0,), ConditionId(id=1): (1,)},
    )
    return mixture


@pytest.fixture
def tiny_config():
    """Seconds-scale fit: 2D, 8x8 images, a handful of splats."""
    return RunConfig(
        name="tiny",
        seed=3,
        n_coarse=3,
        n_fine=4,
        pcds_step_schedule=[(2, 1), (1, 2), (1, 3)],
        batch_size=2,
        n_denoise_steps=5,
        model=ModelSpec(benchmark=BenchmarkSpec(image_size=8, target_splats=4, n_distractors=1)),
        scene=SceneInitSpec(count=4),
    )

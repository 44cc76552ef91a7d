import numpy as np
import pytest

from src.diffusion.consistency import ConsistencyFunction
from src.diffusion.guidance import GuidanceConfig, NegativePrompt
from src.diffusion.schedule import Weighting, gamma
from src.diffusion.score_models import ConditionId, GaussianMixture, MixtureScoreModel, ScoreModel
from src.errors import ParameterError
from src.objectives.gradients import (
    ObjectiveSetup,
    cosine_similarity,
    expected_nfe,
    ism_gradient,
    matched_particles,
    pcds_gradient,
    run_objective,
    sds_gradient,
    true_gradient,
)
from src.objectives.kinds import InversionMode, ObjectiveKind

TARGET = ConditionId(id=0)


@pytest.fixture
def setup(image_mixture, schedule):
    return ObjectiveSetup(schedule=schedule, model=MixtureScoreModel(image_mixture, schedule), n_denoise_steps=10)


@pytest.mark.parametrize("kind", list(ObjectiveKind))
def test_t_zero_is_free_and_zero(kind, setup, scene_2d, camera_2d):
    before = setup.model.nfe
    estimate = run_objective(kind, setup, scene_2d, camera_2d, 0, condition=TARGET, noise=np.zeros((1, 192)))
    assert setup.model.nfe == before
    assert estimate.nfe == 0
    assert np.all(estimate.residual == 0.0)
    assert estimate.grads.norm() == 0.0


@pytest.mark.parametrize(
    "kind, inversion, n_steps",
    [
        (ObjectiveKind.SDS, InversionMode.DDPM, 1),
        (ObjectiveKind.ISM, InversionMode.DDIM, 1),
        (ObjectiveKind.TRUE, InversionMode.DDIM, 1),
        (ObjectiveKind.TRUE, InversionMode.DDPM, 1),
        (ObjectiveKind.PCDS, InversionMode.DDPM, 1),
        (ObjectiveKind.PCDS, InversionMode.DDIM, 2),
        (ObjectiveKind.PCDS, InversionMode.DDIM, 3),
    ],
)
@pytest.mark.parametrize("guided", [False, True])
def test_nfe_matches_closed_form(kind, inversion, n_steps, guided, setup, scene_2d, camera_2d, rng):
    guidance = None
    if guided:
        guidance = GuidanceConfig(positive=TARGET, w_g=5.0, negatives=[NegativePrompt(condition=ConditionId(id=1))])
    estimate = run_objective(
        kind, setup, scene_2d, camera_2d, 500, guidance,
        condition=TARGET, n_steps=n_steps, inversion=inversion, noise=rng.standard_normal((1, 192)),
    )
    assert estimate.nfe == expected_nfe(kind, 500, setup, guidance, n_steps, inversion)


def test_pcds_refinement_costs_no_extra_renoising(setup, scene_2d, camera_2d):
    one = run_objective(ObjectiveKind.PCDS, setup, scene_2d, camera_2d, 450, condition=TARGET)
    three = run_objective(ObjectiveKind.PCDS, setup, scene_2d, camera_2d, 450, condition=TARGET, n_steps=3)
    # same inversion path; each refinement step is one query and nothing else
    assert three.nfe - one.nfe == 2


def test_multi_step_pcds_rejects_ddpm_noising(setup, scene_2d, camera_2d, rng):
    with pytest.raises(ParameterError):
        pcds_gradient(
            scene_2d, camera_2d, 650, setup.schedule, setup.f, n_steps=2, inversion=InversionMode.DDPM, rng=rng
        )


def test_sds_residual_is_weighted_noise_error(setup, scene_2d, camera_2d, rng):
    noise = rng.standard_normal(192)
    estimate = sds_gradient(scene_2d, camera_2d, 400, setup.schedule, setup.model, condition=TARGET, noise=noise)
    a = setup.schedule.alpha_bars[400]
    x_t = np.sqrt(a) * estimate.x0 + np.sqrt(1 - a) * noise
    eps_hat = setup.model.eval(x_t, 400, TARGET)
    np.testing.assert_allclose(estimate.residual, eps_hat - noise, rtol=1e-9, atol=1e-9)


def test_weighting_scales_residual(setup, scene_2d, camera_2d, rng):
    noise = rng.standard_normal(192)
    plain = sds_gradient(scene_2d, camera_2d, 400, setup.schedule, setup.model, condition=TARGET, noise=noise)
    weighted = sds_gradient(
        scene_2d, camera_2d, 400, setup.schedule, setup.model,
        condition=TARGET, noise=noise, weighting=Weighting.ONE_MINUS_ALPHA_BAR,
    )
    np.testing.assert_allclose(weighted.residual, (1 - setup.schedule.alpha_bars[400]) * plain.residual, rtol=1e-12)


def test_one_step_pcds_with_ddpm_matches_sds(setup, scene_2d, camera_2d, rng):
    noise = rng.standard_normal(192)
    sds = sds_gradient(scene_2d, camera_2d, 350, setup.schedule, setup.model, condition=TARGET, noise=noise)
    pcds = pcds_gradient(
        scene_2d, camera_2d, 350, setup.schedule, setup.f,
        inversion=InversionMode.DDPM, condition=TARGET, noise=noise,
    )
    np.testing.assert_allclose(pcds.pseudo_gt, sds.pseudo_gt, rtol=1e-10, atol=1e-12)


def test_sds_particles_average(setup, scene_2d, camera_2d, rng):
    noise = rng.standard_normal((3, 192))
    averaged = sds_gradient(scene_2d, camera_2d, 300, setup.schedule, setup.model, condition=TARGET, noise=noise, n_particles=3)
    singles = [
        sds_gradient(scene_2d, camera_2d, 300, setup.schedule, setup.model, condition=TARGET, noise=row).pseudo_gt
        for row in noise
    ]
    np.testing.assert_allclose(averaged.pseudo_gt, np.mean(singles, axis=0), rtol=1e-12)
    assert averaged.nfe == 3


def test_ism_residual_is_interval_score(setup, scene_2d, camera_2d):
    estimate = ism_gradient(scene_2d, camera_2d, 500, 200, setup.schedule, setup.model, condition=TARGET)
    interval = estimate.residual
    np.testing.assert_allclose(estimate.pseudo_gt, estimate.x0 - gamma(setup.schedule, 500) * interval, rtol=1e-12)


def test_ism_negative_interval_start(setup, scene_2d, camera_2d):
    with pytest.raises(ParameterError):
        ism_gradient(scene_2d, camera_2d, 100, 200, setup.schedule, setup.model)


@pytest.mark.parametrize("n_steps", [0, 4])
def test_pcds_step_count_bounds(n_steps, setup, scene_2d, camera_2d, rng):
    with pytest.raises(ParameterError):
        pcds_gradient(scene_2d, camera_2d, 300, setup.schedule, setup.f, n_steps=n_steps, rng=rng)


def test_noise_shape_checked(setup, scene_2d, camera_2d):
    with pytest.raises(ParameterError):
        sds_gradient(scene_2d, camera_2d, 300, setup.schedule, setup.model, noise=np.zeros(5))
    with pytest.raises(ParameterError):
        sds_gradient(scene_2d, camera_2d, 300, setup.schedule, setup.model)


def test_true_gradient_pulls_render_toward_target(setup, scene_2d, camera_2d, image_mixture):
    estimate = run_objective(ObjectiveKind.TRUE, setup, scene_2d, camera_2d, 300, condition=TARGET)
    target = image_mixture.means[0]
    assert np.linalg.norm(estimate.pseudo_gt - target) < np.linalg.norm(estimate.x0 - target)


def test_estimate_serializes(setup, scene_2d, camera_2d, rng):
    estimate = run_objective(ObjectiveKind.SDS, setup, scene_2d, camera_2d, 300, condition=TARGET, noise=rng.standard_normal((1, 192)))
    data = estimate.to_dict()
    assert data["objective"] == "sds" and data["nfe"] == 1
    assert set(data["grads"]) == {"position", "scale", "rotation", "color", "opacity"}


def test_cosine_similarity_edge_cases():
    assert cosine_similarity(np.zeros(3), np.zeros(3)) == 1.0
    assert cosine_similarity(np.zeros(3), np.ones(3)) == 0.0
    assert cosine_similarity(np.array([1.0, 0.0]), np.array([-2.0, 0.0])) == -1.0


def test_matched_particles_rounds_up():
    guidance = GuidanceConfig(positive=TARGET)
    assert matched_particles(7, guidance) == 4
    assert matched_particles(1, None) == 1
    assert matched_particles(0, guidance) == 1


@pytest.mark.slow
def test_more_pcds_steps_move_closer_to_true(image_mixture, schedule, rng):
    from src.splatting.camera import image_plane_camera
    from src.splatting.scene import random_scene

    setup = ObjectiveSetup(schedule=schedule, model=MixtureScoreModel(image_mixture, schedule), n_denoise_steps=50)
    camera = image_plane_camera((8, 8))
    errors = {1: [], 2: [], 3: []}
    for _ in range(20):
        scene = random_scene(5, 2, rng)
        for t in (300, 500, 700):
            true = run_objective(ObjectiveKind.TRUE, setup, scene, camera, t, condition=TARGET)
            for n_steps in errors:
                pcds = run_objective(ObjectiveKind.PCDS, setup, scene, camera, t, condition=TARGET, n_steps=n_steps)
                errors[n_steps].append(np.sqrt(np.mean((pcds.pseudo_gt - true.pseudo_gt) ** 2)))
    means = [np.mean(errors[n]) for n in (1, 2, 3)]
    assert means[0] >= means[1] >= means[2]


class ConstantEps(ScoreModel):
    """Predicts the same eps at every input, so x0 sits on its own DDIM path."""

    def __init__(self, eps):
        super().__init__(eps.size)
        self.eps = eps

    def _predict(self, x, t, condition):
        return self.eps.copy()


def test_render_on_the_data_path_is_a_fixed_point(schedule, scene_2d, camera_2d, rng):
    eps = rng.standard_normal(192)
    model = ConstantEps(eps)
    guidance = GuidanceConfig(positive=TARGET, w_g=7.5)
    t = 400
    estimates = [
        true_gradient(scene_2d, camera_2d, t, schedule, model, guidance, 10),
        sds_gradient(scene_2d, camera_2d, t, schedule, model, guidance, noise=eps),
        ism_gradient(scene_2d, camera_2d, t, 200, schedule, model, guidance),
        pcds_gradient(scene_2d, camera_2d, t, schedule, ConsistencyFunction(model), guidance, 3, InversionMode.DDIM),
    ]
    for estimate in estimates:
        np.testing.assert_allclose(estimate.residual, 0.0, atol=1e-10)
        assert estimate.grads.norm() < 1e-8


def test_ism_drifts_from_true_as_t_grows(image_mixture, schedule, scene_2d, camera_2d):
    model = MixtureScoreModel(image_mixture, schedule)
    delta = 200

    def eta(t):
        true = true_gradient(scene_2d, camera_2d, t, schedule, model, n_denoise_steps=10, condition=TARGET, stepsize=delta)
        ism = ism_gradient(scene_2d, camera_2d, t, delta, schedule, model, condition=TARGET)
        return np.linalg.norm(true.residual - ism.residual)

    assert eta(delta) < eta(3 * delta)


def test_true_pseudo_gt_converges_as_steps_double(image_mixture, schedule, scene_2d, camera_2d):
    mixture = GaussianMixture([1.0], [image_mixture.means[0]], [0.3])
    model = MixtureScoreModel(mixture, schedule)
    pseudo = {
        n: true_gradient(scene_2d, camera_2d, 300, schedule, model, n_denoise_steps=n).pseudo_gt for n in (25, 50, 100)
    }

    def rms(a, b):
        return float(np.sqrt(np.mean((a - b) ** 2)))

    coarse, fine = rms(pseudo[25], pseudo[50]), rms(pseudo[50], pseudo[100])
    # DDIM is first order: doubling the steps roughly halves the change
    assert fine < 0.75 * coarse

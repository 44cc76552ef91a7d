"""
The toy fitting benchmark.

A fixed random reference scene is rendered from canonical cameras; those
renders are the means of a Gaussian mixture over flattened images, so the
exact score of "what the target looks like" is known in closed form.
Distractor scenes add unconditional modes that guidance has to steer away
from.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np

from config.settings import GuidanceSettings, RunConfig
from src.diffusion.consistency import ConsistencyFunction
from src.diffusion.denoiser import load_denoiser
from src.diffusion.guidance import GuidanceConfig, ScoreTrace, bind_pose, guidance_for_pose
from src.diffusion.schedule import NoiseSchedule, build_schedule
from src.diffusion.score_models import ConditionId, GaussianMixture, MixtureScoreModel, ScoreModel, ViewBin
from src.errors import ArtifactError, ModelError
from src.objectives.gradients import ObjectiveSetup
from src.splatting.camera import CameraPose, image_plane_camera, orbit_camera
from src.splatting.renderer import render
from src.splatting.scene import SplatScene, random_scene

logger = logging.getLogger(__name__)

# canonical viewpoints: (bin, azimuth, elevation)
CANONICAL_VIEWS: List[Tuple[ViewBin, float, float]] = [
    (ViewBin.FRONT, 0.0, 0.0),
    (ViewBin.SIDE, math.pi / 2, 0.0),
    (ViewBin.BACK, math.pi, 0.0),
    (ViewBin.SIDE, -math.pi / 2, 0.0),
]
OVERHEAD_VIEW = (ViewBin.OVERHEAD, 0.0, math.radians(75.0))

TargetKey = Optional[ViewBin]


@dataclass
class Benchmark:
    mixture: GaussianMixture
    reference: SplatScene
    mode: str
    image_size: Tuple[int, int]
    conditions: Dict[TargetKey, ConditionId]
    targets: List[Tuple[CameraPose, np.ndarray]]
    pose_dependent: bool

    @property
    def dim(self) -> int:
        return self.mixture.dim

    @property
    def eval_camera(self) -> CameraPose:
        return self.targets[0][0]

    def guidance_for(self, camera: CameraPose, settings: GuidanceSettings) -> GuidanceConfig:
        if self.pose_dependent:
            binding = bind_pose(camera, settings.w_c, settings.include_overhead)
            return guidance_for_pose(binding, self.conditions, settings.w_g)
        return GuidanceConfig(positive=self.conditions[None], w_g=settings.w_g)

    def target_mse(self, scene: SplatScene) -> float:
        """Mean image MSE against the target mode, averaged over the canonical cameras."""
        errors = [np.mean((render(scene, camera).flat() - target) ** 2) for camera, target in self.targets]
        return float(np.mean(errors))


def build_benchmark(config: RunConfig) -> Benchmark:
    spec = config.model.benchmark
    size = (spec.image_size, spec.image_size)
    rng = np.random.default_rng(spec.seed)
    dim = 2 if config.scene.mode == "2d" else 3
    reference = random_scene(spec.target_splats, dim, rng, extent=0.6 if dim == 2 else 0.5)
    distractors = [random_scene(spec.target_splats, dim, rng) for _ in range(spec.n_distractors)]

    if dim == 2:
        camera = image_plane_camera(size)
        views = [(None, camera)]
    else:
        radius = config.camera_radius
        canonical = list(CANONICAL_VIEWS)
        if config.guidance.include_overhead:
            canonical.append(OVERHEAD_VIEW)
        views = [(b, orbit_camera(az, el, radius, size)) for b, az, el in canonical]

    means, groups = [], {}
    targets = []
    for bin_, camera in views:
        image = render(reference, camera).flat()
        groups.setdefault(bin_, []).append(len(means))
        means.append(image)
        targets.append((camera, image))
    for distractor in distractors:
        means.append(render(distractor, views[0][1]).flat())

    pose_dependent = dim == 3 and config.guidance.pose_dependent
    condition_map: Dict[ConditionId, Tuple[int, ...]] = {}
    conditions: Dict[TargetKey, ConditionId] = {}
    if pose_dependent:
        for bin_, indices in groups.items():
            cond = ConditionId(id=0, view_bin=bin_)
            conditions[bin_] = cond
            condition_map[cond] = tuple(indices)
    else:
        # a view-agnostic prompt covers every rendered view of the reference
        cond = ConditionId(id=0)
        conditions[None] = cond
        condition_map[cond] = tuple(i for indices in groups.values() for i in indices)
    n_views = len(targets)
    for k in range(len(distractors)):
        condition_map[ConditionId(id=k + 1)] = (n_views + k,)

    k_total = len(means)
    mixture = GaussianMixture(
        weights=np.full(k_total, 1.0 / k_total),
        means=np.stack(means),
        sigmas=np.full(k_total, spec.mode_sigma),
        condition_map=condition_map,
    )
    logger.debug("benchmark mixture: %d components in %d dimensions", k_total, mixture.dim)
    return Benchmark(mixture, reference, config.scene.mode, size, conditions, targets, pose_dependent)


def schedule_for(config: RunConfig) -> NoiseSchedule:
    spec = config.schedule
    return build_schedule(spec.kind, spec.T, spec.beta_start, spec.beta_end)


def _load_checkpoint(path: str, dim: int) -> ScoreModel:
    try:
        model = load_denoiser(path)
    except ArtifactError as e:
        raise ModelError(str(e)) from e
    if model.dim != dim:
        raise ModelError(f"checkpoint {path} predicts {model.dim}-dimensional eps, benchmark needs {dim}")
    return model


def build_objective_setup(config: RunConfig, benchmark: Benchmark, schedule: NoiseSchedule) -> ObjectiveSetup:
    """Score model and consistency function for the configured model kind.

    "consistency" keeps the mixture oracle for the diffusion-model objectives
    and uses the distilled student only inside PCDS.
    """
    oracle = MixtureScoreModel(benchmark.mixture, schedule)
    if config.model.kind == "analytic":
        model, f = oracle, None
    elif config.model.kind == "denoiser":
        model = _load_checkpoint(config.model.checkpoint, benchmark.dim)
        f = None
    else:
        model = oracle
        f = ConsistencyFunction(_load_checkpoint(config.model.checkpoint, benchmark.dim))
    return ObjectiveSetup(
        schedule=schedule,
        model=model,
        consistency=f,
        stepsize=config.ddim_stepsize,
        n_denoise_steps=config.n_denoise_steps,
        sds_particles=config.sds_particles,
        weighting=config.schedule.weighting,
        weight_table=config.schedule.weighting_table,
        trace=ScoreTrace() if config.trace_scores else None,
    )

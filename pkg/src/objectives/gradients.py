"""
Score-distillation gradients for one rendered view.

Each estimator renders x0 = g(theta, c), forms a pseudo ground truth and
pulls the residual r back through the renderer. For TRUE, SDS and PCDS
r = (omega(t) / gamma(t)) * (x0 - pseudo_gt); ISM uses its eps-space form
r = omega(t) * (eps_hat(x_t, t, y) - eps(x_s, s, none)). At t = 0 every
estimator returns a zero residual without touching the model.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from src.diffusion.consistency import ConsistencyFunction, consistency_eval
from src.diffusion.guidance import GuidanceConfig, ScoreTrace, compose_eps, guided_cost
from src.diffusion.schedule import (
    LatentSample,
    NoiseSchedule,
    Weighting,
    ddim_denoise,
    ddim_invert,
    ddim_step,
    ddpm_forward,
    gamma,
    inversion_timesteps,
    omega,
    predict_x0,
    uniform_timesteps,
)
from src.diffusion.score_models import Condition, ScoreModel
from src.errors import ParameterError
from src.objectives.kinds import InversionMode, ObjectiveKind
from src.splatting.camera import CameraPose
from src.splatting.renderer import RenderedView, render, render_backward
from src.splatting.scene import SplatGradients, SplatScene

logger = logging.getLogger(__name__)

MAX_PCDS_STEPS = 3


@dataclass
class GradientEstimate:
    grads: SplatGradients
    pseudo_gt: np.ndarray
    residual: np.ndarray
    x0: np.ndarray
    nfe: int
    objective: ObjectiveKind
    t: int
    pose: CameraPose

    @property
    def loss(self) -> float:
        """Mean squared distance between the render and its pseudo ground truth."""
        return float(np.mean((self.x0 - self.pseudo_gt) ** 2))

    def to_dict(self) -> dict:
        return {
            "objective": self.objective.value,
            "t": self.t,
            "nfe": self.nfe,
            "pose": self.pose.to_dict(),
            "loss": self.loss,
            "grads": self.grads.to_dict(),
        }


class _NFETally:
    """Evaluations made by the calling thread since construction."""

    def __init__(self, model: ScoreModel):
        self.model = model
        self.start = model.nfe_counter.thread_count

    @property
    def used(self) -> int:
        return self.model.nfe_counter.thread_count - self.start


def _draw_noise(noise: Optional[np.ndarray], rng: Optional[np.random.Generator], shape) -> np.ndarray:
    if noise is not None:
        noise = np.asarray(noise, dtype=np.float64)
        if noise.shape != tuple(shape):
            raise ParameterError(f"noise must have shape {tuple(shape)}, got {noise.shape}")
        return noise
    if rng is None:
        raise ParameterError("either noise or rng must be given")
    return rng.standard_normal(shape)


def _noised(
    schedule: NoiseSchedule,
    model: ScoreModel,
    x0: np.ndarray,
    t: int,
    inversion: InversionMode,
    stepsize: int,
    noise: Optional[np.ndarray],
    rng: Optional[np.random.Generator],
) -> LatentSample:
    inversion = InversionMode(inversion)
    if inversion is InversionMode.DDPM:
        return ddpm_forward(schedule, x0, t, _draw_noise(noise, rng, x0.shape))
    return ddim_invert(schedule, x0, t, stepsize, model).final


def _finish(
    objective: ObjectiveKind,
    scene: SplatScene,
    pose: CameraPose,
    view: RenderedView,
    t: int,
    pseudo_gt: np.ndarray,
    nfe: int,
    schedule: NoiseSchedule,
    weighting: Weighting,
    weight_table: Optional[Sequence[float]],
    residual: Optional[np.ndarray] = None,
) -> GradientEstimate:
    x0 = view.flat()
    if residual is None:
        if t == 0:
            residual = np.zeros_like(x0)
        else:
            residual = (omega(schedule, t, weighting, weight_table) / gamma(schedule, t)) * (x0 - pseudo_gt)
    grads = render_backward(scene, pose, residual.reshape(view.pixels.shape), view=view)
    return GradientEstimate(grads, pseudo_gt, residual, x0, nfe, objective, t, pose)


def _boundary(objective, scene, pose, view, schedule, weighting, weight_table) -> GradientEstimate:
    return _finish(objective, scene, pose, view, 0, view.flat().copy(), 0, schedule, weighting, weight_table)


def true_gradient(
    scene: SplatScene,
    pose: CameraPose,
    t: int,
    schedule: NoiseSchedule,
    model: ScoreModel,
    guidance: Optional[GuidanceConfig] = None,
    n_denoise_steps: int = 50,
    *,
    condition: Condition = None,
    inversion: InversionMode = InversionMode.DDIM,
    stepsize: int = 200,
    noise: Optional[np.ndarray] = None,
    rng: Optional[np.random.Generator] = None,
    weighting: Weighting = Weighting.CONSTANT,
    weight_table: Optional[Sequence[float]] = None,
    trace: Optional[ScoreTrace] = None,
) -> GradientEstimate:
    """Full guided DDIM denoising from x_t gives the pseudo ground truth."""
    t = schedule.check_t(t)
    view = render(scene, pose)
    if t == 0:
        return _boundary(ObjectiveKind.TRUE, scene, pose, view, schedule, weighting, weight_table)
    if n_denoise_steps < 50:
        logger.debug("TRUE with %d denoising steps is below the converged setting", n_denoise_steps)

    tally = _NFETally(model)
    x_t = _noised(schedule, model, view.flat(), t, inversion, stepsize, noise, rng)
    final = ddim_denoise(
        schedule,
        x_t,
        uniform_timesteps(t, n_denoise_steps),
        lambda x, tt: compose_eps(model, x, tt, guidance, condition, trace),
    )
    return _finish(ObjectiveKind.TRUE, scene, pose, view, t, final.x, tally.used, schedule, weighting, weight_table)


def sds_gradient(
    scene: SplatScene,
    pose: CameraPose,
    t: int,
    schedule: NoiseSchedule,
    model: ScoreModel,
    guidance: Optional[GuidanceConfig] = None,
    *,
    condition: Condition = None,
    noise: Optional[np.ndarray] = None,
    rng: Optional[np.random.Generator] = None,
    n_particles: int = 1,
    weighting: Weighting = Weighting.CONSTANT,
    weight_table: Optional[Sequence[float]] = None,
    trace: Optional[ScoreTrace] = None,
) -> GradientEstimate:
    """1-step DDPM estimate; n_particles > 1 averages independent noisings.

    noise has shape (D,) for one particle or (n_particles, D).
    """
    t = schedule.check_t(t)
    if n_particles < 1:
        raise ParameterError(f"n_particles must be >= 1, got {n_particles}")
    view = render(scene, pose)
    if t == 0:
        return _boundary(ObjectiveKind.SDS, scene, pose, view, schedule, weighting, weight_table)

    x0 = view.flat()
    if noise is not None and np.ndim(noise) == 1:
        noise = np.asarray(noise)[None, :]
    noise = _draw_noise(noise, rng, (n_particles, x0.size))
    tally = _NFETally(model)
    estimates = []
    for particle in noise:
        x_t = ddpm_forward(schedule, x0, t, particle)
        estimates.append(predict_x0(schedule, x_t, compose_eps(model, x_t.x, t, guidance, condition, trace)))
    pseudo_gt = estimates[0] if n_particles == 1 else np.mean(estimates, axis=0)
    return _finish(ObjectiveKind.SDS, scene, pose, view, t, pseudo_gt, tally.used, schedule, weighting, weight_table)


def ism_gradient(
    scene: SplatScene,
    pose: CameraPose,
    t: int,
    stepsize: int,
    schedule: NoiseSchedule,
    model: ScoreModel,
    guidance: Optional[GuidanceConfig] = None,
    *,
    condition: Condition = None,
    weighting: Weighting = Weighting.CONSTANT,
    weight_table: Optional[Sequence[float]] = None,
    trace: Optional[ScoreTrace] = None,
) -> GradientEstimate:
    """Interval score at (s, t) with s = t - stepsize; x_s comes from DDIM inversion.

    The unconditional eps at x_s both carries x_s to x_t and is the
    subtracted term, so it costs exactly one evaluation past the path to s.
    """
    t = schedule.check_t(t)
    view = render(scene, pose)
    if t == 0:
        return _boundary(ObjectiveKind.ISM, scene, pose, view, schedule, weighting, weight_table)
    s = t - stepsize
    if s < 0:
        raise ParameterError(f"interval start s = t - stepsize = {s} is negative")

    x0 = view.flat()
    tally = _NFETally(model)
    x_s = ddim_invert(schedule, x0, s, stepsize, model).final
    eps_s = model.eval(x_s.x, s, None)
    x_t = ddim_step(schedule, x_s, t, eps_s)
    interval = compose_eps(model, x_t.x, t, guidance, condition, trace) - eps_s
    residual = omega(schedule, t, weighting, weight_table) * interval
    pseudo_gt = x0 - gamma(schedule, t) * interval
    return _finish(
        ObjectiveKind.ISM, scene, pose, view, t, pseudo_gt, tally.used, schedule, weighting, weight_table, residual
    )


def pcds_gradient(
    scene: SplatScene,
    pose: CameraPose,
    t: int,
    schedule: NoiseSchedule,
    f: ConsistencyFunction,
    guidance: Optional[GuidanceConfig] = None,
    n_steps: int = 1,
    inversion: InversionMode = InversionMode.DDPM,
    stepsize: int = 200,
    *,
    condition: Condition = None,
    noise: Optional[np.ndarray] = None,
    rng: Optional[np.random.Generator] = None,
    weighting: Weighting = Weighting.CONSTANT,
    weight_table: Optional[Sequence[float]] = None,
    trace: Optional[ScoreTrace] = None,
) -> GradientEstimate:
    """Consistency-function pseudo ground truth refined over n_steps.

    For k = n_steps-1 .. 1 the current estimate is re-noised to
    t_f = floor(k t / n_steps) with the conditional eps already computed at
    t_n = floor((k+1) t / n_steps), then mapped back through f.
    """
    t = schedule.check_t(t)
    if not 1 <= n_steps <= MAX_PCDS_STEPS:
        raise ParameterError(f"n_steps must be in [1, {MAX_PCDS_STEPS}], got {n_steps}")
    if InversionMode(inversion) is InversionMode.DDPM and n_steps > 1:
        raise ParameterError("DDPM noising is the one-step coarse configuration; multi-step PCDS needs DDIM inversion")
    view = render(scene, pose)
    if t == 0:
        return _boundary(ObjectiveKind.PCDS, scene, pose, view, schedule, weighting, weight_table)

    tally = _NFETally(f.backbone)
    x_t = _noised(schedule, f.backbone, view.flat(), t, inversion, stepsize, noise, rng)
    out = consistency_eval(f, schedule, x_t.x, t, condition, guidance, trace)
    for k in range(n_steps - 1, 0, -1):
        t_f = (k * t) // n_steps
        eps_n = out.eps_cond if out.eps_cond is not None else np.zeros_like(out.x0)
        x_f = schedule.sqrt_alpha_bar(t_f) * out.x0 + schedule.sqrt_one_minus_alpha_bar(t_f) * eps_n
        out = consistency_eval(f, schedule, x_f, t_f, condition, guidance, trace)
    return _finish(ObjectiveKind.PCDS, scene, pose, view, t, out.x0, tally.used, schedule, weighting, weight_table)


@dataclass
class ObjectiveSetup:
    """Everything the estimators share within one campaign."""
    schedule: NoiseSchedule
    model: ScoreModel
    consistency: Optional[ConsistencyFunction] = None
    stepsize: int = 200
    n_denoise_steps: int = 50
    sds_particles: int = 1
    weighting: Weighting = Weighting.CONSTANT
    weight_table: Optional[Sequence[float]] = field(default=None, repr=False)
    # collects guided compositions when set
    trace: Optional[ScoreTrace] = field(default=None, repr=False)

    @property
    def f(self) -> ConsistencyFunction:
        return self.consistency if self.consistency is not None else ConsistencyFunction(self.model)


def _inversion_cost(t: int, stepsize: int, inversion: InversionMode) -> int:
    if InversionMode(inversion) is InversionMode.DDPM or t == 0:
        return 0
    return len(inversion_timesteps(t, stepsize)) - 1


def expected_nfe(
    kind: ObjectiveKind,
    t: int,
    setup: ObjectiveSetup,
    guidance: Optional[GuidanceConfig] = None,
    n_steps: int = 1,
    inversion: InversionMode = InversionMode.DDIM,
    n_particles: Optional[int] = None,
) -> int:
    """Closed-form evaluation count of one estimator call."""
    if t == 0:
        return 0
    cost = guided_cost(guidance)
    if kind is ObjectiveKind.SDS:
        return (n_particles or setup.sds_particles) * cost
    if kind is ObjectiveKind.ISM:
        return _inversion_cost(t - setup.stepsize, setup.stepsize, InversionMode.DDIM) + 1 + cost
    if kind is ObjectiveKind.TRUE:
        steps = len(uniform_timesteps(t, setup.n_denoise_steps)) - 1
        return _inversion_cost(t, setup.stepsize, inversion) + steps * cost
    queries = [t] + [(k * t) // n_steps for k in range(n_steps - 1, 0, -1)]
    return _inversion_cost(t, setup.stepsize, inversion) + sum(cost for q in queries if q > 0)


def run_objective(
    kind: ObjectiveKind,
    setup: ObjectiveSetup,
    scene: SplatScene,
    pose: CameraPose,
    t: int,
    guidance: Optional[GuidanceConfig] = None,
    *,
    condition: Condition = None,
    n_steps: int = 1,
    inversion: InversionMode = InversionMode.DDIM,
    noise: Optional[np.ndarray] = None,
    n_particles: Optional[int] = None,
) -> GradientEstimate:
    """Dispatch to one estimator.

    noise is an (n, D) block drawn by the caller; SDS uses n_particles rows,
    the DDPM-noised estimators use row 0. `inversion` applies to TRUE and PCDS.
    """
    kind = ObjectiveKind(kind)
    weights = dict(weighting=setup.weighting, weight_table=setup.weight_table, trace=setup.trace)
    first = None if noise is None else np.atleast_2d(noise)[0]
    if kind is ObjectiveKind.TRUE:
        return true_gradient(
            scene, pose, t, setup.schedule, setup.model, guidance, setup.n_denoise_steps,
            condition=condition, inversion=inversion, stepsize=setup.stepsize, noise=first, **weights,
        )
    if kind is ObjectiveKind.SDS:
        particles = n_particles or setup.sds_particles
        block = None if noise is None else np.atleast_2d(noise)[:particles]
        return sds_gradient(
            scene, pose, t, setup.schedule, setup.model, guidance,
            condition=condition, noise=block, n_particles=particles, **weights,
        )
    if kind is ObjectiveKind.ISM:
        return ism_gradient(
            scene, pose, t, setup.stepsize, setup.schedule, setup.model, guidance, condition=condition, **weights
        )
    return pcds_gradient(
        scene, pose, t, setup.schedule, setup.f, guidance, n_steps, inversion, setup.stepsize,
        condition=condition, noise=first, **weights,
    )


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    """Cosine in [-1, 1]; 1 when both vectors vanish, 0 when only one does."""
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 and nb == 0.0:
        return 1.0
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def matched_particles(target_nfe: int, guidance: Optional[GuidanceConfig]) -> int:
    """SDS particle count whose cost reaches target_nfe."""
    return max(1, math.ceil(target_nfe / guided_cost(guidance)))


GuidanceFor = Callable[[CameraPose], Optional[GuidanceConfig]]

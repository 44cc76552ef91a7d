"""
Consistency function f(x_t, t, y) -> x_0 estimate and consistency distillation.

f is the two-branch map: identity at t = 0, and for t > 0 the 1-step DDIM
estimate C(x_t, t, y) = x_t / sqrt(a_t) - gamma(t) * eps_hat(x_t, t, y).
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from config.settings import DenoiserConfig, DistillConfig
from src.diffusion.denoiser import Adam, ToyDenoiser
from src.diffusion.guidance import GuidanceConfig, ScoreTrace, perp_neg_compose
from src.diffusion.schedule import LatentSample, NoiseSchedule, ddim_invert, ddim_step, gamma
from src.diffusion.score_models import (
    Condition,
    ConditionId,
    LabeledSamples,
    MixtureScoreModel,
    ScoreModel,
    sample_labeled_dataset,
)
from src.errors import ParameterError, TrainingError

logger = logging.getLogger(__name__)


@dataclass
class ConsistencyFunction:
    backbone: ScoreModel

    @staticmethod
    def f_in(t: int) -> float:
        return 1.0 if t == 0 else 0.0

    @staticmethod
    def f_out(t: int) -> float:
        return 0.0 if t == 0 else 1.0


@dataclass
class ConsistencyOutput:
    x0: np.ndarray
    # conditional eps at the query point; None on the t = 0 branch
    eps_cond: Optional[np.ndarray] = None


def consistency_eval(
    f: ConsistencyFunction,
    schedule: NoiseSchedule,
    x: np.ndarray,
    t: int,
    condition: Condition = None,
    guidance: Optional[GuidanceConfig] = None,
    trace: Optional[ScoreTrace] = None,
) -> ConsistencyOutput:
    t = schedule.check_t(t)
    x = np.asarray(x, dtype=np.float64)
    if t == 0:
        return ConsistencyOutput(x)
    if guidance is None:
        eps_hat = eps_cond = f.backbone.eval(x, t, condition)
    else:
        composed = perp_neg_compose(f.backbone, x, t, guidance, trace)
        eps_hat, eps_cond = composed.eps, composed.eps_cond
    x0 = x / schedule.sqrt_alpha_bar(t) - gamma(schedule, t) * eps_hat
    return ConsistencyOutput(x0, eps_cond)


def consistency_apply(
    f: ConsistencyFunction,
    schedule: NoiseSchedule,
    x: np.ndarray,
    t: int,
    condition: Condition = None,
    guidance: Optional[GuidanceConfig] = None,
    trace: Optional[ScoreTrace] = None,
) -> np.ndarray:
    return consistency_eval(f, schedule, x, t, condition, guidance, trace).x0


def self_consistency_residual(
    f: ConsistencyFunction,
    teacher: ScoreModel,
    schedule: NoiseSchedule,
    x0: np.ndarray,
    pairs: Sequence[Tuple[int, int]],
    stepsize: int,
    condition: Condition = None,
) -> np.ndarray:
    """||f(x_t, t) - f(x_s, s)|| / ||f(x_t, t)|| for (t, s) pairs on teacher trajectories.

    Returns one relative residual per (sample, pair); both timesteps of a pair
    must lie on the inversion grid of stepsize.
    """
    residuals = []
    t_max = max(max(p) for p in pairs)
    for x in np.atleast_2d(x0):
        trajectory = ddim_invert(schedule, x, t_max, stepsize, teacher)
        for t, s in pairs:
            f_t = consistency_apply(f, schedule, trajectory.state_at(t).x, t, condition)
            f_s = consistency_apply(f, schedule, trajectory.state_at(s).x, s, condition)
            residuals.append(np.linalg.norm(f_t - f_s) / max(np.linalg.norm(f_t), 1e-12))
    return np.asarray(residuals)


def _student_f(model: ToyDenoiser, schedule: NoiseSchedule, x: np.ndarray, t: np.ndarray, cond_idx: np.ndarray):
    """Batched f for t > 0 entries, identity where t == 0; also returns the forward cache."""
    eps, cache = model.forward_batch(x, t, cond_idx)
    c = np.sqrt(schedule.alpha_bars[t])[:, None]
    s = np.sqrt(1.0 - schedule.alpha_bars[t])[:, None]
    f = np.where(t[:, None] == 0, x, (x - s * eps) / c)
    return f, cache


def _ema_update(target: ToyDenoiser, online: ToyDenoiser, rate: float) -> None:
    for name, value in online.params.items():
        target.params[name] = rate * target.params[name] + (1.0 - rate) * value


def consistency_distill(
    teacher: ScoreModel,
    schedule: NoiseSchedule,
    config: DistillConfig,
    dataset: Optional[LabeledSamples] = None,
) -> ConsistencyFunction:
    """Distill a student whose f maps every point of a teacher DDIM path to its origin.

    The returned function wraps the EMA copy of the student.
    """
    rng = np.random.default_rng(config.seed)
    if dataset is None:
        if not isinstance(teacher, MixtureScoreModel):
            raise ParameterError("a dataset is required unless the teacher is the mixture oracle")
        dataset = sample_labeled_dataset(teacher.mixture, config.dataset_size, rng)

    if isinstance(teacher, ToyDenoiser):
        student = teacher.copy()
    else:
        conditions: List[ConditionId] = sorted(
            {c for c in dataset.conditions if c is not None}, key=lambda c: c.label()
        )
        init = DenoiserConfig(width=config.width, depth=config.depth, n_freqs=config.n_freqs, seed=config.seed)
        student = ToyDenoiser.initialize(dataset.x.shape[1], conditions, init, schedule.T, rng)
    target = student.copy()
    if config.iterations == 0:
        return ConsistencyFunction(target)

    labels = np.array([student.condition_index(c) for c in dataset.conditions])
    optimizer = Adam(student.params, config.learning_rate)
    k = config.ode_stepsize
    sqrt_ab = np.sqrt(schedule.alpha_bars)
    sqrt_1m_ab = np.sqrt(1.0 - schedule.alpha_bars)

    for iteration in tqdm(range(config.iterations), desc="distill consistency"):
        idx = rng.integers(0, len(dataset), size=config.batch_size)
        x0 = dataset.x[idx]
        cond_idx = np.where(rng.random(config.batch_size) < config.p_uncond, 0, labels[idx])
        t_hi = rng.integers(k, schedule.T + 1, size=config.batch_size)
        t_lo = t_hi - k
        noise = rng.standard_normal(x0.shape)
        x_hi = sqrt_ab[t_hi, None] * x0 + sqrt_1m_ab[t_hi, None] * noise

        x_lo = np.empty_like(x_hi)
        for b in range(config.batch_size):
            cond = None if cond_idx[b] == 0 else student.conditions[cond_idx[b] - 1]
            eps = teacher.eval(x_hi[b], int(t_hi[b]), cond)
            x_lo[b] = ddim_step(schedule, LatentSample(x_hi[b], int(t_hi[b]), schedule.T), int(t_lo[b]), eps).x

        f_target, _ = _student_f(target, schedule, x_lo, t_lo, cond_idx)
        f_online, cache = _student_f(student, schedule, x_hi, t_hi, cond_idx)
        diff = f_online - f_target
        loss = float(np.mean(np.sum(diff**2, axis=1)))
        if not math.isfinite(loss):
            raise TrainingError("consistency loss is not finite", iteration)

        # df/d eps = -sqrt(1 - a_t) / sqrt(a_t); t_hi >= k >= 1 so every row is on the t > 0 branch
        grad_eps = 2.0 * diff * (-sqrt_1m_ab[t_hi, None] / sqrt_ab[t_hi, None]) / config.batch_size
        optimizer.step(student.params, student.backward(cache, grad_eps))
        _ema_update(target, student, config.ema_rate)
        if iteration % max(1, config.iterations // 10) == 0:
            logger.debug("distill iteration %d loss %.6f", iteration, loss)

    return ConsistencyFunction(target)

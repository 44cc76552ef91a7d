"""
Discrete noise schedules, forward diffusion and deterministic DDIM
trajectories.

alpha_bars is indexed so that alpha_bars[0] == 1.0 (clean data) and
alpha_bars[t] = prod_{s <= t} (1 - beta_s) for t = 1..T, where betas[s - 1]
holds beta_s.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import TYPE_CHECKING, Callable, List, Optional, Sequence

import numpy as np

from src.errors import ArtifactError, ParameterError

if TYPE_CHECKING:
    from src.diffusion.score_models import ScoreModel

logger = logging.getLogger(__name__)

SCHEDULE_SCHEMA = "pcds-lab/schedule@1"

EpsFn = Callable[[np.ndarray, int], np.ndarray]


class ScheduleKind(Enum):
    LINEAR = "linear"
    COSINE = "cosine"


class Weighting(Enum):
    """Choices for the timestep weight omega(t)."""
    CONSTANT = "constant"
    ONE_MINUS_ALPHA_BAR = "one_minus_alpha_bar"
    TABLE = "table"


@dataclass(frozen=True)
class NoiseSchedule:
    kind: ScheduleKind
    T: int
    beta_start: float
    beta_end: float
    betas: np.ndarray
    alpha_bars: np.ndarray

    def check_t(self, t: int) -> int:
        if isinstance(t, (bool, np.bool_)) or int(t) != t:
            raise ParameterError(f"timestep must be an integer, got {t!r}")
        t = int(t)
        if not 0 <= t <= self.T:
            raise ParameterError(f"timestep {t} outside [0, {self.T}]")
        return t

    def sqrt_alpha_bar(self, t: int) -> float:
        return math.sqrt(self.alpha_bars[self.check_t(t)])

    def sqrt_one_minus_alpha_bar(self, t: int) -> float:
        return math.sqrt(1.0 - self.alpha_bars[self.check_t(t)])

    def to_dict(self) -> dict:
        return {
            "schema": SCHEDULE_SCHEMA,
            "kind": self.kind.value,
            "T": self.T,
            "beta_start": self.beta_start,
            "beta_end": self.beta_end,
            "betas": [float(b) for b in self.betas],
            "alpha_bars": [float(a) for a in self.alpha_bars],
        }


@dataclass(frozen=True)
class LatentSample:
    x: np.ndarray
    t: int
    # horizon of the schedule that produced the sample; bounds t when set
    T: Optional[int] = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if isinstance(self.t, (bool, np.bool_)) or int(self.t) != self.t:
            raise ParameterError(f"timestep must be an integer, got {self.t!r}")
        upper = self.T if self.T is not None else self.t
        if not 0 <= self.t <= upper:
            raise ParameterError(f"timestep {self.t} outside [0, {self.T}]")
        if not np.all(np.isfinite(self.x)):
            raise ParameterError(f"non-finite latent at t={self.t}")


@dataclass(frozen=True)
class InversionTrajectory:
    timesteps: List[int]
    states: List[LatentSample]
    stepsize: int
    nfe: int = 0

    @property
    def final(self) -> LatentSample:
        return self.states[-1]

    def state_at(self, t: int) -> LatentSample:
        for state in self.states:
            if state.t == t:
                return state
        raise ParameterError(f"timestep {t} is not on the trajectory {self.timesteps}")


def build_schedule(
    kind: ScheduleKind | str,
    T: int,
    beta_start: float = 1e-4,
    beta_end: float = 0.02,
    cosine_offset: float = 0.008,
) -> NoiseSchedule:
    """Precompute beta and alpha-bar tables for a schedule."""
    kind = ScheduleKind(kind)
    if T < 1:
        raise ParameterError(f"T must be >= 1, got {T}")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ParameterError(
            f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
        )

    if kind is ScheduleKind.LINEAR:
        betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    else:
        # alpha_bar(t) = f(t) / f(0), betas capped below one; beta_start floors
        # the first steps so alpha_bars stays strictly decreasing.
        steps = np.arange(T + 1, dtype=np.float64) / T
        f = np.cos((steps + cosine_offset) / (1.0 + cosine_offset) * math.pi / 2) ** 2
        betas = 1.0 - f[1:] / f[:-1]
        betas = np.clip(betas, beta_start, 0.999)

    alpha_bars = np.empty(T + 1, dtype=np.float64)
    alpha_bars[0] = 1.0
    alpha_bars[1:] = np.cumprod(1.0 - betas)
    return NoiseSchedule(kind, T, float(beta_start), float(beta_end), betas, alpha_bars)


def schedule_from_dict(data: dict) -> NoiseSchedule:
    if data.get("schema") != SCHEDULE_SCHEMA:
        raise ArtifactError(f"unsupported schedule schema {data.get('schema')!r}")
    schedule = build_schedule(data["kind"], data["T"], data["beta_start"], data["beta_end"])
    stored = np.asarray(data["alpha_bars"], dtype=np.float64)
    if stored.shape != schedule.alpha_bars.shape or not np.array_equal(stored, schedule.alpha_bars):
        logger.warning("stored alpha_bars differ from the rebuilt table; using stored values")
        schedule = NoiseSchedule(
            schedule.kind,
            schedule.T,
            schedule.beta_start,
            schedule.beta_end,
            np.asarray(data["betas"], dtype=np.float64),
            stored,
        )
    return schedule


def save_schedule(schedule: NoiseSchedule, path: str) -> None:
    # json writes floats with repr(), which round-trips doubles exactly
    with open(path, "w") as fh:
        json.dump(schedule.to_dict(), fh)


def load_schedule(path: str) -> NoiseSchedule:
    with open(path) as fh:
        return schedule_from_dict(json.load(fh))


def gamma(schedule: NoiseSchedule, t: int) -> float:
    """sqrt(1 - alpha_bar_t) / sqrt(alpha_bar_t)."""
    t = schedule.check_t(t)
    return math.sqrt(1.0 - schedule.alpha_bars[t]) / math.sqrt(schedule.alpha_bars[t])


def omega(
    schedule: NoiseSchedule,
    t: int,
    weighting: Weighting | str = Weighting.CONSTANT,
    table: Optional[Sequence[float]] = None,
) -> float:
    t = schedule.check_t(t)
    weighting = Weighting(weighting)
    if weighting is Weighting.CONSTANT:
        return 1.0
    if weighting is Weighting.ONE_MINUS_ALPHA_BAR:
        return float(1.0 - schedule.alpha_bars[t])
    if table is None or len(table) != schedule.T + 1:
        raise ParameterError(f"omega table must have {schedule.T + 1} entries")
    return float(table[t])


def ddpm_forward(schedule: NoiseSchedule, x0: np.ndarray, t: int, noise: np.ndarray) -> LatentSample:
    x0 = np.asarray(x0, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    if noise.shape != x0.shape:
        raise ParameterError(f"noise shape {noise.shape} does not match x0 shape {x0.shape}")
    t = schedule.check_t(t)
    x = schedule.sqrt_alpha_bar(t) * x0 + schedule.sqrt_one_minus_alpha_bar(t) * noise
    return LatentSample(x, t, schedule.T)


def predict_x0(schedule: NoiseSchedule, sample: LatentSample, eps: np.ndarray) -> np.ndarray:
    """1-step clean estimate (x - sqrt(1 - a_t) eps) / sqrt(a_t)."""
    return (sample.x - schedule.sqrt_one_minus_alpha_bar(sample.t) * eps) / schedule.sqrt_alpha_bar(sample.t)


def ddim_step(schedule: NoiseSchedule, sample: LatentSample, t_next: int, eps: np.ndarray) -> LatentSample:
    """Deterministic DDIM move from sample.t to t_next (either direction)."""
    t_next = schedule.check_t(t_next)
    schedule.check_t(sample.t)
    if eps.shape != sample.x.shape:
        raise ParameterError(f"eps shape {eps.shape} does not match latent shape {sample.x.shape}")
    if t_next == sample.t:
        return sample
    x0_hat = predict_x0(schedule, sample, eps)
    x = schedule.sqrt_alpha_bar(t_next) * x0_hat + schedule.sqrt_one_minus_alpha_bar(t_next) * eps
    return LatentSample(x, t_next, schedule.T)


def inversion_timesteps(t_target: int, stepsize: int) -> List[int]:
    """{0, d, 2d, ..., t_target} with the last step clamped to t_target."""
    if stepsize < 1:
        raise ParameterError(f"stepsize must be >= 1, got {stepsize}")
    if t_target == 0:
        return [0]
    n_inv = math.ceil(t_target / stepsize)
    return [0] + [min((j + 1) * stepsize, t_target) for j in range(n_inv)]


def uniform_timesteps(t_start: int, n_steps: int) -> List[int]:
    """Descending, de-duplicated integer grid from t_start to 0."""
    if n_steps < 1:
        raise ParameterError(f"n_steps must be >= 1, got {n_steps}")
    grid = np.round(np.linspace(t_start, 0, n_steps + 1)).astype(int).tolist()
    steps: List[int] = []
    for t in grid:
        if not steps or t != steps[-1]:
            steps.append(t)
    return steps


def ddim_invert(
    schedule: NoiseSchedule,
    x0: np.ndarray,
    t_target: int,
    stepsize: int,
    model: "ScoreModel",
) -> InversionTrajectory:
    """Unconditional DDIM inversion from t=0 up to t_target, keeping every state."""
    t_target = schedule.check_t(t_target)
    if t_target > 0 and stepsize < 1:
        raise ParameterError(f"stepsize must be >= 1, got {stepsize}")
    x = np.asarray(x0, dtype=np.float64)
    state = LatentSample(x, 0, schedule.T)
    states = [state]
    timesteps = inversion_timesteps(t_target, stepsize)
    nfe = 0
    for t_n, t_f in zip(timesteps[:-1], timesteps[1:]):
        eps = model.eval(state.x, t_n, None)
        nfe += 1
        state = ddim_step(schedule, state, t_f, eps)
        states.append(state)
    return InversionTrajectory(timesteps, states, stepsize, nfe)


def ddim_denoise(
    schedule: NoiseSchedule,
    sample: LatentSample,
    timesteps: Sequence[int],
    eps_fn: EpsFn,
) -> LatentSample:
    """Deterministic DDIM sampling down a descending timestep list.

    eps_fn(x, t) supplies the (possibly guided) noise prediction.
    """
    if not timesteps or timesteps[0] != sample.t:
        raise ParameterError(f"timesteps must start at the sample's t={sample.t}")
    for t_cur, t_next in zip(timesteps[:-1], timesteps[1:]):
        if t_next >= t_cur:
            raise ParameterError(f"timesteps must be strictly descending, got {list(timesteps)}")
        sample = ddim_step(schedule, sample, t_next, eps_fn(sample.x, t_cur))
    return sample


def ddim_reconstruct(
    schedule: NoiseSchedule,
    trajectory: InversionTrajectory,
    model: "ScoreModel",
    fixed_point_iters: int = 3,
) -> LatentSample:
    """Walk an inversion trajectory back to t=0 from its final state.

    Each inversion step used eps evaluated at the lower timestep, so the exact
    reverse of a step is implicit in x_{t_n}; it is solved by fixed-point
    iteration started from the explicit DDIM reverse step.
    """
    state = trajectory.final
    for t_n, t_f in reversed(list(zip(trajectory.timesteps[:-1], trajectory.timesteps[1:]))):
        x_f = state.x
        guess = ddim_step(schedule, LatentSample(x_f, t_f, schedule.T), t_n, model.eval(x_f, t_f, None)).x
        ratio = schedule.sqrt_alpha_bar(t_n) / schedule.sqrt_alpha_bar(t_f)
        for _ in range(fixed_point_iters):
            eps = model.eval(guess, t_n, None)
            guess = (
                ratio * (x_f - schedule.sqrt_one_minus_alpha_bar(t_f) * eps)
                + schedule.sqrt_one_minus_alpha_bar(t_n) * eps
            )
        state = LatentSample(guess, t_n, schedule.T)
    return state

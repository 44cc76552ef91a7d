"""
Process settings and the run-configuration schema.

Environment values come from .env via dotenv; run configurations are JSON
files validated by the pydantic models below.
"""
import json
import os
from typing import List, Literal, Optional, Tuple

from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from src.diffusion.schedule import ScheduleKind, Weighting
from src.errors import ConfigError
from src.objectives.kinds import InversionMode, ObjectiveKind

load_dotenv()

DEFAULT_DB_DIR = os.path.join(os.path.dirname(os.path.dirname(__file__)), "storage", "database")


class Settings(BaseModel):
    out_dir: str = "outputs"
    database_url: str = f"sqlite:///{os.path.join(DEFAULT_DB_DIR, 'runs.db')}"
    workers: int = Field(1, ge=1)


def get_settings() -> Settings:
    values = {
        "out_dir": os.getenv("PCDS_OUT_DIR"),
        "database_url": os.getenv("PCDS_DATABASE_URL"),
        "workers": os.getenv("PCDS_WORKERS"),
    }
    return Settings(**{k: v for k, v in values.items() if v is not None})


class DenoiserConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    width: int = Field(64, ge=1)
    depth: int = Field(2, ge=1)
    n_freqs: int = Field(8, ge=1)
    learning_rate: float = Field(1e-3, gt=0)
    iterations: int = Field(3000, ge=0)
    batch_size: int = Field(128, ge=1)
    p_uncond: float = Field(0.1, ge=0, le=1)
    seed: int = 0


class DistillConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    ode_stepsize: int = Field(20, ge=1)
    ema_rate: float = Field(0.95, ge=0, lt=1)
    iterations: int = Field(2000, ge=0)
    batch_size: int = Field(32, ge=1)
    learning_rate: float = Field(1e-3, gt=0)
    width: int = Field(64, ge=1)
    depth: int = Field(2, ge=1)
    n_freqs: int = Field(8, ge=1)
    p_uncond: float = Field(0.1, ge=0, le=1)
    dataset_size: int = Field(1024, ge=1)
    seed: int = 0


class ScheduleSpec(BaseModel):
    model_config = ConfigDict(extra="forbid")

    kind: ScheduleKind = ScheduleKind.LINEAR
    T: int = Field(1000, ge=1)
    beta_start: float = 1e-4
    beta_end: float = 0.02
    weighting: Weighting = Weighting.CONSTANT
    weighting_table: Optional[List[float]] = None


class BenchmarkSpec(BaseModel):
    """The toy target: mixture modes are renders of a fixed reference scene."""
    model_config = ConfigDict(extra="forbid")

    image_size: int = Field(32, ge=4)
    target_splats: int = Field(24, ge=1)
    n_distractors: int = Field(3, ge=0)
    mode_sigma: float = Field(0.05, gt=0)
    seed: int = 1234


class ModelSpec(BaseModel):
    model_config = ConfigDict(extra="forbid")

    kind: Literal["analytic", "denoiser", "consistency"] = "analytic"
    checkpoint: Optional[str] = None
    benchmark: BenchmarkSpec = Field(default_factory=BenchmarkSpec)

    @model_validator(mode="after")
    def _checkpoint_present(self):
        if self.kind != "analytic" and not self.checkpoint:
            raise ValueError(f"model kind '{self.kind}' needs a checkpoint path")
        return self


class GuidanceSettings(BaseModel):
    model_config = ConfigDict(extra="forbid")

    w_g: float = 7.5
    w_c: float = Field(0.5, ge=0)
    pose_dependent: bool = False
    include_overhead: bool = False


class SceneInitSpec(BaseModel):
    model_config = ConfigDict(extra="forbid")

    primitive: str = "grid"
    count: int = Field(64, ge=1)
    mode: Literal["2d", "3d"] = "2d"
    radius: float = Field(0.6, gt=0)
    inner_radius: float = Field(0.3, ge=0)
    init_scale: float = Field(0.08, gt=0)
    seed: int = 0


class LearningRates(BaseModel):
    model_config = ConfigDict(extra="forbid")

    position: float = Field(2e-3, ge=0)
    scale: float = Field(1e-2, ge=0)
    rotation: float = Field(1e-2, ge=0)
    color: float = Field(5e-2, ge=0)
    opacity: float = Field(5e-2, ge=0)


class RunConfig(BaseModel):
    """Everything one coarse-to-fine fit needs; defaults are the published setup."""
    model_config = ConfigDict(extra="forbid")

    name: str = "fit"
    seed: int = 0
    objective: ObjectiveKind = ObjectiveKind.PCDS
    n_coarse: int = Field(500, ge=0)
    n_fine: int = Field(2500, ge=0)
    ddim_stepsize: int = Field(200, ge=1)
    coarse_t_range: Tuple[int, int] = (600, 700)
    fine_t_range: Tuple[int, int] = (300, 500)
    coarse_inversion: InversionMode = InversionMode.DDPM
    pcds_step_schedule: List[Tuple[int, int]] = Field(default_factory=lambda: [(1000, 1), (800, 2), (700, 3)])
    batch_size: int = Field(4, ge=1)
    learning_rates: LearningRates = Field(default_factory=LearningRates)
    momentum: float = Field(0.9, ge=0, lt=1)
    n_denoise_steps: int = Field(50, ge=1)
    sds_particles: int = Field(1, ge=1)
    nfe_budget: Optional[int] = Field(None, ge=1)
    camera_radius: float = Field(4.0, gt=0)
    elevation_range_deg: Tuple[float, float] = (-30.0, 30.0)
    workers: int = Field(1, ge=1)
    turntable_frames: int = Field(0, ge=0)
    # write every guided composition (t, conditions, norms, orthogonality) to score_trace.csv
    trace_scores: bool = False
    schedule: ScheduleSpec = Field(default_factory=ScheduleSpec)
    model: ModelSpec = Field(default_factory=ModelSpec)
    guidance: GuidanceSettings = Field(default_factory=GuidanceSettings)
    scene: SceneInitSpec = Field(default_factory=SceneInitSpec)

    @model_validator(mode="after")
    def _check_schedule(self):
        total = sum(iters for iters, _ in self.pcds_step_schedule)
        if total != self.n_fine:
            raise ValueError(f"pcds_step_schedule iterations sum to {total}, expected n_fine={self.n_fine}")
        for iters, n_p in self.pcds_step_schedule:
            if iters < 0 or not 1 <= n_p <= 3:
                raise ValueError(f"invalid step-schedule entry ({iters}, {n_p}); N_p must be in [1, 3]")
        for label, (lo, hi) in (("coarse_t_range", self.coarse_t_range), ("fine_t_range", self.fine_t_range)):
            if not 0 <= lo <= hi <= self.schedule.T:
                raise ValueError(f"{label} {lo}..{hi} must lie within [0, {self.schedule.T}]")
        return self

    def n_p_at(self, fine_iteration: int) -> int:
        """PCDS step count for the given fine-stage iteration; the last entry extends past n_fine."""
        for iters, n_p in self.pcds_step_schedule:
            if fine_iteration < iters:
                return n_p
            fine_iteration -= iters
        return self.pcds_step_schedule[-1][1] if self.pcds_step_schedule else 1


class BiasConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    objectives: List[ObjectiveKind] = Field(
        default_factory=lambda: [ObjectiveKind.TRUE, ObjectiveKind.SDS, ObjectiveKind.ISM, ObjectiveKind.PCDS]
    )
    timesteps: List[int] = Field(default_factory=lambda: [300, 500, 700])
    samples: int = Field(100, ge=1)
    n_poses: int = Field(1, ge=1)
    pcds_steps: int = Field(1, ge=1, le=3)
    pcds_inversion: InversionMode = InversionMode.DDIM
    true_inversion: InversionMode = InversionMode.DDIM
    match_nfe: bool = True
    seed: int = 0

    @model_validator(mode="after")
    def _check_pcds_noising(self):
        if self.pcds_inversion is InversionMode.DDPM and self.pcds_steps > 1:
            raise ValueError("DDPM noising only supports one-step PCDS; use pcds_inversion=ddim")
        return self


def paper_preset() -> RunConfig:
    return RunConfig(name="paper")


def toy_preset() -> RunConfig:
    return RunConfig(
        name="toy",
        n_coarse=20,
        n_fine=30,
        pcds_step_schedule=[(10, 1), (10, 2), (10, 3)],
        batch_size=2,
        n_denoise_steps=10,
        model=ModelSpec(benchmark=BenchmarkSpec(image_size=16, target_splats=8)),
        scene=SceneInitSpec(count=16),
    )


PRESETS = {"paper": paper_preset, "toy": toy_preset}


def load_run_config(path: Optional[str] = None, preset: Optional[str] = None, **overrides) -> RunConfig:
    """Preset first, then the JSON file on top of it, then keyword overrides."""
    try:
        if preset is not None and preset not in PRESETS:
            raise ConfigError(f"unknown preset '{preset}' (choose from {sorted(PRESETS)})")
        data = PRESETS[preset]().model_dump(mode="json") if preset else {}
        if path:
            with open(path) as fh:
                data.update(json.load(fh))
        data.update({k: v for k, v in overrides.items() if v is not None})
        return RunConfig.model_validate(data)
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"could not read config {path}: {e}") from e
    except ValidationError as e:
        raise ConfigError(f"invalid run config: {e}") from e

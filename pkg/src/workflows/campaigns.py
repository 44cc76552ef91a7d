"""
Multi-run campaigns built on the coarse-to-fine flow: equal-NFE objective
comparisons, turntable renders, bias measurements and the model-training
jobs the CLI exposes.
"""
import logging
import math
import os
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Union

import numpy as np

from config.settings import BiasConfig, DenoiserConfig, DistillConfig, RunConfig
from src.diffusion.consistency import consistency_distill
from src.diffusion.denoiser import save_denoiser, train_toy_denoiser
from src.diffusion.score_models import MixtureScoreModel, sample_labeled_dataset, save_mixture
from src.errors import ParameterError
from src.objectives.bias import BiasReport, measure_bias
from src.objectives.kinds import ObjectiveKind
from src.splatting.camera import camera_for_mode, sample_pose, save_camera_path, turntable_path
from src.splatting.renderer import render
from src.splatting.scene import SplatScene, init_scene, load_scene
from src.utils.file_io import save_csv, save_image, save_json, side_by_side
from src.workflows.benchmark import build_benchmark, build_objective_setup, schedule_for
from src.workflows.coarse_to_fine import RunArtifacts, run_coarse_to_fine

logger = logging.getLogger(__name__)

COMPARISON_FIELDS = ("variant", "objective", "seed", "iterations", "total_nfe", "initial_mse", "final_mse")


def _pinned_pcds(steps: int) -> Callable[[RunConfig], RunConfig]:
    def build(c: RunConfig) -> RunConfig:
        return c.model_copy(update={
            "name": f"{c.name}-pcds{steps}",
            "objective": ObjectiveKind.PCDS,
            "pcds_step_schedule": [(c.n_fine, steps)],
        })
    return build


# variants beyond the plain objectives: PCDS pinned to one step count for the whole fine stage;
# plain "pcds" is the coarse-to-fine escalation they are compared against
VARIANTS: Dict[str, Callable[[RunConfig], RunConfig]] = {
    "pcds1": _pinned_pcds(1),
    "pcds3": _pinned_pcds(3),
}


def variant_config(config: RunConfig, variant: str) -> RunConfig:
    if variant in VARIANTS:
        return VARIANTS[variant](config)
    try:
        kind = ObjectiveKind(variant)
    except ValueError:
        choices = [k.value for k in ObjectiveKind] + sorted(VARIANTS)
        raise ParameterError(f"unknown objective '{variant}' (choose from {choices})")
    return config.model_copy(update={"objective": kind})


@dataclass
class ComparisonArtifacts:
    runs: Dict[str, RunArtifacts]
    nfe_budget: Optional[int]
    matched: bool
    manifest_path: str
    comparison_path: Optional[str] = None
    image_path: Optional[str] = None


def compare_objectives(
    config: RunConfig,
    variants: Sequence[str],
    out_dir: str,
    seeds: Optional[Dict[str, int]] = None,
    use_db: bool = False,
    session_factory: Optional[Callable] = None,
) -> ComparisonArtifacts:
    """Fit the same target with several objectives at one total NFE.

    The first variant runs its configured iteration counts (or config.nfe_budget)
    and its total NFE becomes the budget of every other variant. Runs with
    differing seeds are still reported but flagged as unmatched.
    """
    if not variants:
        raise ParameterError("compare needs at least one objective")
    if len(set(variants)) != len(variants):
        raise ParameterError(f"duplicate objectives in {list(variants)}")
    seeds = seeds or {}
    run_seeds = {v: seeds.get(v, config.seed) for v in variants}

    print(f"Comparing {', '.join(variants)} on '{config.name}'")
    print("=" * 80)
    runs: Dict[str, RunArtifacts] = {}
    reference, others = variants[0], variants[1:]
    ref_config = variant_config(config, reference).model_copy(update={"seed": run_seeds[reference]})
    runs[reference] = run_coarse_to_fine(ref_config, os.path.join(out_dir, reference), use_db, session_factory)
    budget = runs[reference].total_nfe if others else config.nfe_budget
    if others:
        print(f"\n✓ Reference {reference} spent {budget} NFE; matching the other objectives to it")

    for variant in others:
        cfg = variant_config(config, variant).model_copy(update={"seed": run_seeds[variant], "nfe_budget": max(budget, 1)})
        runs[variant] = run_coarse_to_fine(cfg, os.path.join(out_dir, variant), use_db, session_factory)

    matched = len(set(run_seeds.values())) == 1
    if not matched:
        print(f"⚠ Runs use different seeds {run_seeds}; comparison is unmatched")

    rows = [
        {
            "variant": v,
            "objective": a.run.objective,
            "seed": a.run.seed,
            "iterations": a.iterations,
            "total_nfe": a.total_nfe,
            "initial_mse": a.initial_mse,
            "final_mse": a.final_mse,
        }
        for v, a in runs.items()
    ]
    comparison_path = save_csv(rows, os.path.join(out_dir, "comparison.csv"), COMPARISON_FIELDS)

    camera = build_benchmark(config).eval_camera
    tiles = [render(a.scene, camera).pixels for a in runs.values()]
    image_path = save_image(side_by_side(tiles), os.path.join(out_dir, "side_by_side.png"))

    manifest_path = save_json(
        {
            "schema": "pcds-lab/comparison@1",
            "variants": list(variants),
            "nfe_budget": budget,
            "matched": matched,
            "seeds": run_seeds,
            "runs": {v: a.manifest_path for v, a in runs.items()},
            "comparison": comparison_path,
            "side_by_side": image_path,
            "final_mse": {v: a.final_mse for v, a in runs.items()},
        },
        os.path.join(out_dir, "manifest.json"),
    )
    logger.info("comparison written to %s (reference run %s)", manifest_path, runs[reference].run.run_id)
    print("=" * 80)
    return ComparisonArtifacts(runs, budget, matched, manifest_path, comparison_path, image_path)


@dataclass
class TurntableArtifacts:
    frames: List[str] = field(default_factory=list)
    camera_path: Optional[str] = None
    manifest_path: Optional[str] = None


def render_turntable(
    scene: Union[SplatScene, str],
    n_frames: int,
    out_dir: str,
    elevation: float = 0.0,
    radius: float = 4.0,
    image_size=(32, 32),
    scale: int = 4,
) -> TurntableArtifacts:
    """Render n_frames evenly spaced azimuths; elevation is in radians."""
    if isinstance(scene, str):
        scene = load_scene(scene)
    cameras = turntable_path(n_frames, elevation, radius, tuple(image_size), scene.mode)
    frames = []
    for k, camera in enumerate(cameras):
        frames.append(save_image(render(scene, camera).pixels, os.path.join(out_dir, f"frame_{k:03d}.png"), scale))
    camera_path = os.path.join(out_dir, "camera_path.json")
    save_camera_path(cameras, camera_path)
    manifest_path = save_json(
        {
            "schema": "pcds-lab/turntable@1",
            "n_frames": n_frames,
            "elevation": elevation,
            "radius": radius,
            "image_size": list(image_size),
            "frames": frames,
            "camera_path": camera_path,
        },
        os.path.join(out_dir, "manifest.json"),
    )
    print(f"✓ {n_frames} turntable frames written to {out_dir}")
    return TurntableArtifacts(frames, camera_path, manifest_path)


@dataclass
class BiasArtifacts:
    report: BiasReport
    csv_path: str
    json_path: str
    manifest_path: str
    trace_path: Optional[str] = None


def run_bias_campaign(
    config: RunConfig,
    bias: BiasConfig,
    out_dir: str,
    scene: Optional[SplatScene] = None,
) -> BiasArtifacts:
    """Measure each objective against the TRUE gradient on the benchmark target.

    Without an explicit scene the configured initialization is measured.
    """
    print(f"Measuring gradient bias of {', '.join(k.value for k in bias.objectives)} "
          f"at t={bias.timesteps} over {bias.samples} samples")
    print("=" * 80)
    benchmark = build_benchmark(config)
    setup = build_objective_setup(config, benchmark, schedule_for(config))
    if scene is None:
        scene = init_scene(config.scene)
    rng = np.random.default_rng(bias.seed)
    size = benchmark.image_size
    if bias.n_poses == 1:
        poses = [camera_for_mode(config.scene.mode, 0.0, 0.0, config.camera_radius, size)]
    else:
        poses = [
            sample_pose(rng, config.scene.mode, config.camera_radius, size, config.elevation_range_deg)
            for _ in range(bias.n_poses)
        ]
    report = measure_bias(
        scene, poses, bias.timesteps, setup, bias,
        guidance_for=lambda pose: benchmark.guidance_for(pose, config.guidance),
        workers=config.workers,
    )
    csv_path = report.to_csv(os.path.join(out_dir, "bias.csv"))
    json_path = report.to_json(os.path.join(out_dir, "bias.json"))
    trace_path = setup.trace.to_csv(os.path.join(out_dir, "score_trace.csv")) if setup.trace is not None else None
    for kind in bias.objectives:
        cosine = report.mean_cosine(kind)
        if not math.isnan(cosine):
            print(f"  {kind.value:>5}: mean cosine to TRUE {cosine:+.4f}")
    manifest_path = save_json(
        {
            "schema": "pcds-lab/bias@1",
            "bias": bias.model_dump(mode="json"),
            "config": config.model_dump(mode="json"),
            "csv": csv_path,
            "json": json_path,
            "score_trace": trace_path,
        },
        os.path.join(out_dir, "manifest.json"),
    )
    print(f"✓ Bias report written to {csv_path}")
    print("=" * 80)
    return BiasArtifacts(report, csv_path, json_path, manifest_path, trace_path)


def train_denoiser_campaign(config: RunConfig, denoiser: DenoiserConfig, out_dir: str, samples_per_condition: int = 512) -> str:
    """Fit the toy denoiser to samples of the benchmark mixture; returns the checkpoint path."""
    benchmark = build_benchmark(config)
    schedule = schedule_for(config)
    rng = np.random.default_rng(denoiser.seed)
    dataset = sample_labeled_dataset(benchmark.mixture, samples_per_condition, rng)
    print(f"Training toy denoiser on {len(dataset)} samples ({benchmark.dim} dimensions)")
    model = train_toy_denoiser(dataset, schedule, denoiser)
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, "denoiser.json")
    save_denoiser(model, path)
    save_mixture(benchmark.mixture, os.path.join(out_dir, "mixture.json"))
    print(f"✓ Denoiser checkpoint written to {path}")
    return path


def distill_campaign(config: RunConfig, distill: DistillConfig, out_dir: str) -> str:
    """Distill a consistency student from the benchmark's mixture oracle; returns the checkpoint path."""
    benchmark = build_benchmark(config)
    schedule = schedule_for(config)
    print(f"Distilling consistency function over {distill.iterations} iterations")
    f = consistency_distill(MixtureScoreModel(benchmark.mixture, schedule), schedule, distill)
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, "consistency.json")
    save_denoiser(f.backbone, path)
    print(f"✓ Consistency checkpoint written to {path}")
    return path

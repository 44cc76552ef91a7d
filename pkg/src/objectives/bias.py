"""
Bias of the cheap estimators against the full-denoising gradient.

Every (pose, t, sample) cell draws one noise block from a seed derived from
the cell, so all objectives see the same noise and the same DDIM paths.
"""
from __future__ import annotations

import csv
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from config.settings import BiasConfig
from src.diffusion.guidance import view_bin_for
from src.diffusion.score_models import Condition
from src.errors import ArtifactError
from src.objectives.gradients import (
    GradientEstimate,
    GuidanceFor,
    ObjectiveSetup,
    cosine_similarity,
    expected_nfe,
    matched_particles,
    run_objective,
)
from src.objectives.kinds import InversionMode, ObjectiveKind
from src.splatting.camera import CameraPose
from src.splatting.scene import SplatScene

logger = logging.getLogger(__name__)

CSV_HEADER = ("objective", "t", "pose_bin", "cosine", "mag_ratio", "eta_residual", "nfe")
MIN_SAMPLES = 100


@dataclass
class BiasRow:
    objective: ObjectiveKind
    t: int
    pose_bin: str
    pose_index: int
    cosine: float
    cosine_std: float
    mag_ratio: float
    mag_ratio_std: float
    eta_residual: float
    nfe: float
    samples: int

    def csv_row(self) -> Tuple:
        return (self.objective.value, self.t, self.pose_bin, self.cosine, self.mag_ratio, self.eta_residual, self.nfe)


@dataclass
class BiasReport:
    rows: List[BiasRow]

    def __len__(self) -> int:
        return len(self.rows)

    def select(self, objective: ObjectiveKind, t: Optional[int] = None) -> List[BiasRow]:
        return [r for r in self.rows if r.objective is objective and (t is None or r.t == t)]

    def mean_cosine(self, objective: ObjectiveKind, t: Optional[int] = None) -> float:
        rows = self.select(objective, t)
        return float(np.average([r.cosine for r in rows], weights=[r.samples for r in rows]))

    def to_csv(self, path: str) -> str:
        try:
            os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
            with open(path, "w", newline="") as fh:
                writer = csv.writer(fh)
                writer.writerow(CSV_HEADER)
                for row in self.rows:
                    writer.writerow(row.csv_row())
        except OSError as e:
            raise ArtifactError(f"could not write bias report {path}: {e}") from e
        return path

    def to_dict(self) -> dict:
        return {"rows": [{**asdict(r), "objective": r.objective.value} for r in self.rows]}

    def to_json(self, path: str) -> str:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)
        return path


def _is_deterministic(kind: ObjectiveKind, config: BiasConfig) -> bool:
    if kind is ObjectiveKind.ISM:
        return True
    if kind is ObjectiveKind.TRUE:
        return config.true_inversion is InversionMode.DDIM
    if kind is ObjectiveKind.PCDS:
        return config.pcds_inversion is InversionMode.DDIM
    return False


def _cell_noise(config: BiasConfig, pose_index: int, t: int, sample: int, rows: int, dim: int) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, pose_index, t, sample]))
    return rng.standard_normal((rows, dim))


def _measure_cell(
    scene: SplatScene,
    pose_index: int,
    pose: CameraPose,
    t: int,
    setup: ObjectiveSetup,
    config: BiasConfig,
    guidance_for: GuidanceFor,
    condition: Condition,
) -> List[BiasRow]:
    guidance = guidance_for(pose)
    dim = pose.height * pose.width * 3
    particles = setup.sds_particles
    if config.match_nfe:
        target = expected_nfe(
            ObjectiveKind.PCDS, t, setup, guidance, config.pcds_steps, config.pcds_inversion
        )
        particles = matched_particles(target, guidance)

    def estimate(kind: ObjectiveKind, noise: np.ndarray) -> GradientEstimate:
        inversion = config.true_inversion if kind is ObjectiveKind.TRUE else config.pcds_inversion
        return run_objective(
            kind, setup, scene, pose, t, guidance,
            condition=condition, n_steps=config.pcds_steps, inversion=inversion,
            noise=noise, n_particles=particles,
        )

    kinds = [ObjectiveKind.TRUE] + [k for k in config.objectives if k is not ObjectiveKind.TRUE]
    cached: Dict[ObjectiveKind, GradientEstimate] = {}
    stats: Dict[ObjectiveKind, Dict[str, list]] = {k: {"cos": [], "ratio": [], "eta": [], "nfe": []} for k in kinds}
    for sample in range(config.samples):
        noise = _cell_noise(config, pose_index, t, sample, max(particles, 1), dim)
        results = {}
        for kind in kinds:
            if kind in cached:
                results[kind] = cached[kind]
                continue
            results[kind] = estimate(kind, noise)
            if _is_deterministic(kind, config):
                cached[kind] = results[kind]
        true = results[ObjectiveKind.TRUE]
        true_vec, true_norm = true.grads.to_vector(), true.grads.norm()
        for kind in kinds:
            est = results[kind]
            vec = est.grads.to_vector()
            stats[kind]["cos"].append(cosine_similarity(vec, true_vec))
            stats[kind]["ratio"].append(np.linalg.norm(vec) / true_norm if true_norm > 0 else 1.0)
            stats[kind]["eta"].append(float(np.linalg.norm(true.residual - est.residual)))
            stats[kind]["nfe"].append(est.nfe)

    pose_bin = view_bin_for(pose.azimuth, pose.elevation).value
    return [
        BiasRow(
            objective=kind,
            t=t,
            pose_bin=pose_bin,
            pose_index=pose_index,
            cosine=float(np.mean(stats[kind]["cos"])),
            cosine_std=float(np.std(stats[kind]["cos"])),
            mag_ratio=float(np.mean(stats[kind]["ratio"])),
            mag_ratio_std=float(np.std(stats[kind]["ratio"])),
            eta_residual=float(np.mean(stats[kind]["eta"])),
            nfe=float(np.mean(stats[kind]["nfe"])),
            samples=config.samples,
        )
        for kind in kinds
        if kind in config.objectives
    ]


def measure_bias(
    scene: SplatScene,
    poses: Sequence[CameraPose],
    timesteps: Sequence[int],
    setup: ObjectiveSetup,
    config: BiasConfig,
    guidance_for: GuidanceFor = lambda pose: None,
    condition: Condition = None,
    workers: int = 1,
) -> BiasReport:
    """One row per (pose, t, objective), rows ordered pose-major then t then objective."""
    if config.samples < MIN_SAMPLES:
        logger.warning("bias statistics over %d samples per cell (fewer than %d)", config.samples, MIN_SAMPLES)
    timesteps = list(timesteps)
    cells = [(i, pose, t) for i, pose in enumerate(poses) for t in timesteps]

    def run(cell):
        i, pose, t = cell
        return _measure_cell(scene, i, pose, t, setup, config, guidance_for, condition)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as executor:
            chunks = list(tqdm(executor.map(run, cells), total=len(cells), desc="bias cells"))
    else:
        chunks = [run(cell) for cell in tqdm(cells, desc="bias cells")]

    rows = [row for chunk in chunks for row in chunk]
    order = {k: n for n, k in enumerate(config.objectives)}
    rows.sort(key=lambda r: (r.pose_index, timesteps.index(r.t), order[r.objective]))
    return BiasReport(rows)

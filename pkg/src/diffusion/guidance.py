"""
Composition of conditional and unconditional noise predictions:
classifier-free guidance and the pose-dependent perpendicular-negative merge.
"""
from __future__ import annotations

import logging
import math
import threading
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, List, Mapping, Optional, Tuple

import numpy as np
from pydantic import BaseModel, Field

from src.diffusion.score_models import Condition, ConditionId, ScoreModel, ViewBin
from src.errors import ParameterError
from src.utils.file_io import save_csv

if TYPE_CHECKING:
    from src.splatting.camera import CameraPose

logger = logging.getLogger(__name__)

OVERHEAD_ELEVATION = math.radians(60.0)
TRACE_FIELDS = (
    "t", "positive", "negatives", "eps_norm", "pos_norm", "perp_norms", "orthogonality_residual", "degenerate",
)


class NegativePrompt(BaseModel):
    condition: ConditionId
    w_c: float = Field(0.5, ge=0.0)


class GuidanceConfig(BaseModel):
    positive: ConditionId
    w_g: float = 7.5
    negatives: List[NegativePrompt] = Field(default_factory=list)

    @property
    def n_neg(self) -> int:
        return len(self.negatives)

    @property
    def evaluations(self) -> int:
        return self.n_neg + 2


@dataclass
class PerpProjection:
    vector: np.ndarray
    degenerate: bool = False


@dataclass
class ComposedScore:
    eps: np.ndarray
    eps_uncond: np.ndarray
    eps_cond: np.ndarray
    eps_pos: np.ndarray
    perps: List[np.ndarray] = field(default_factory=list)
    degenerate: List[bool] = field(default_factory=list)
    nfe: int = 0

    def orthogonality_residual(self) -> float:
        """Largest |<eps_pos, perp_i>| relative to ||eps_pos|| ||perp_i||."""
        worst = 0.0
        pos_norm = np.linalg.norm(self.eps_pos)
        for perp in self.perps:
            scale = pos_norm * np.linalg.norm(perp)
            if scale > 0:
                worst = max(worst, abs(float(self.eps_pos @ perp)) / scale)
        return worst

    def trace_row(self, t: int, config: "GuidanceConfig") -> dict:
        return {
            "t": t,
            "positive": config.positive.label(),
            "negatives": ";".join(n.condition.label() for n in config.negatives),
            "eps_norm": float(np.linalg.norm(self.eps)),
            "pos_norm": float(np.linalg.norm(self.eps_pos)),
            "perp_norms": ";".join(f"{np.linalg.norm(p):.6g}" for p in self.perps),
            "orthogonality_residual": self.orthogonality_residual(),
            "degenerate": any(self.degenerate),
        }


class ScoreTrace:
    """Rows of every guided composition made while attached; shared across worker threads.

    Unguided evaluations compose nothing and leave no row.
    """

    def __init__(self):
        self._rows: List[dict] = []
        self._lock = threading.Lock()

    def __len__(self) -> int:
        return len(self._rows)

    def record(self, composed: ComposedScore, t: int, config: GuidanceConfig) -> None:
        row = composed.trace_row(t, config)
        with self._lock:
            self._rows.append(row)

    @property
    def rows(self) -> List[dict]:
        with self._lock:
            return list(self._rows)

    def to_csv(self, path: str) -> str:
        return save_csv(self.rows, path, TRACE_FIELDS)


def cfg_compose(eps_uncond: np.ndarray, eps_cond: np.ndarray, w: float) -> np.ndarray:
    if eps_uncond.shape != eps_cond.shape:
        raise ParameterError(f"shape mismatch {eps_uncond.shape} vs {eps_cond.shape}")
    return eps_uncond + w * (eps_cond - eps_uncond)


def perp_component(eps_pos: np.ndarray, eps_neg: np.ndarray) -> PerpProjection:
    """Part of eps_neg orthogonal to eps_pos; passes eps_neg through when eps_pos is zero."""
    if eps_pos.shape != eps_neg.shape:
        raise ParameterError(f"shape mismatch {eps_pos.shape} vs {eps_neg.shape}")
    pos_sq = float(eps_pos @ eps_pos)
    if pos_sq == 0.0:
        return PerpProjection(eps_neg.copy(), degenerate=True)
    return PerpProjection(eps_neg - (float(eps_pos @ eps_neg) / pos_sq) * eps_pos)


def perp_neg_compose(
    model: ScoreModel,
    x: np.ndarray,
    t: int,
    config: GuidanceConfig,
    trace: Optional[ScoreTrace] = None,
) -> ComposedScore:
    """eps_u + w_g [eps_pos - sum_i w_c^i perp(eps_neg^i)] with N_neg + 2 evaluations."""
    eps_uncond = model.eval(x, t, None)
    eps_cond = model.eval(x, t, config.positive)
    eps_pos = eps_cond - eps_uncond

    perps, degenerate = [], []
    correction = None
    for negative in config.negatives:
        eps_neg = model.eval(x, t, negative.condition) - eps_uncond
        projection = perp_component(eps_pos, eps_neg)
        perps.append(projection.vector)
        degenerate.append(projection.degenerate)
        if negative.w_c != 0.0:
            term = negative.w_c * projection.vector
            correction = term if correction is None else correction + term

    if any(degenerate):
        logger.debug("zero positive direction at t=%d; negatives passed through unprojected", t)

    if correction is None:
        eps = cfg_compose(eps_uncond, eps_cond, config.w_g)
    else:
        eps = eps_uncond + config.w_g * (eps_pos - correction)
    composed = ComposedScore(eps, eps_uncond, eps_cond, eps_pos, perps, degenerate, config.evaluations)
    if trace is not None:
        trace.record(composed, t, config)
    return composed


def compose_eps(
    model: ScoreModel,
    x: np.ndarray,
    t: int,
    guidance: Optional[GuidanceConfig] = None,
    condition: Condition = None,
    trace: Optional[ScoreTrace] = None,
) -> np.ndarray:
    """Guided eps-hat when a guidance config is given, else one plain evaluation."""
    if guidance is None:
        return model.eval(x, t, condition)
    return perp_neg_compose(model, x, t, guidance, trace).eps


def guided_cost(guidance: Optional[GuidanceConfig]) -> int:
    return 1 if guidance is None else guidance.evaluations


@dataclass
class PoseBinding:
    camera: "CameraPose"
    positive_bin: ViewBin
    negative_bins: List[Tuple[ViewBin, float]]


def view_bin_for(azimuth: float, elevation: float = 0.0) -> ViewBin:
    """Four-way partition of the view sphere; azimuth 0 faces the front."""
    if elevation >= OVERHEAD_ELEVATION:
        return ViewBin.OVERHEAD
    az = abs(math.degrees(math.remainder(azimuth, 2.0 * math.pi)))
    if az <= 45.0:
        return ViewBin.FRONT
    if az >= 135.0:
        return ViewBin.BACK
    return ViewBin.SIDE


def bind_pose(camera: "CameraPose", w_c: float = 0.5, include_overhead: bool = False) -> PoseBinding:
    positive = view_bin_for(camera.azimuth, camera.elevation)
    candidates = [ViewBin.FRONT, ViewBin.SIDE, ViewBin.BACK]
    if include_overhead:
        candidates.append(ViewBin.OVERHEAD)
    negatives = [(b, w_c) for b in candidates if b is not positive]
    return PoseBinding(camera, positive, negatives)


def guidance_for_pose(
    binding: PoseBinding,
    conditions: Mapping[ViewBin, ConditionId],
    w_g: float = 7.5,
) -> GuidanceConfig:
    """Turn a pose binding into a guidance config; bins without a condition are skipped."""
    if binding.positive_bin not in conditions:
        raise ParameterError(f"no condition registered for view bin {binding.positive_bin.value}")
    negatives = [
        NegativePrompt(condition=conditions[b], w_c=w)
        for b, w in binding.negative_bins
        if b in conditions
    ]
    return GuidanceConfig(positive=conditions[binding.positive_bin], w_g=w_g, negatives=negatives)

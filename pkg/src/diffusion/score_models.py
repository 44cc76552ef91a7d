"""
Noise-prediction models.

Every model exposes eval(x, t, condition) and counts its evaluations; the
exact Gaussian-mixture oracle lives here, the trainable denoiser in
denoiser.py.
"""
from __future__ import annotations

import json
import logging
import math
import threading
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict
from scipy.special import logsumexp, softmax

from src.diffusion.schedule import NoiseSchedule
from src.errors import ArtifactError, ParameterError

logger = logging.getLogger(__name__)

MIXTURE_SCHEMA = "pcds-lab/mixture@1"
SIGMA_FLOOR = 1e-6


class ViewBin(Enum):
    FRONT = "front"
    SIDE = "side"
    BACK = "back"
    OVERHEAD = "overhead"


class ConditionId(BaseModel):
    """Discrete stand-in for a prompt embedding; None means unconditional."""
    model_config = ConfigDict(frozen=True)

    id: int
    view_bin: Optional[ViewBin] = None

    def label(self) -> str:
        return f"{self.id}" if self.view_bin is None else f"{self.id}:{self.view_bin.value}"


Condition = Optional[ConditionId]


class NFECounter:
    """Score-evaluation tally: a locked global count plus a per-thread count.

    Estimators read the per-thread count before and after their work so
    concurrent workers sharing one model still get exact per-call totals.
    """

    def __init__(self):
        self._lock = threading.Lock()
        self._count = 0
        self._local = threading.local()

    def increment(self, n: int = 1) -> None:
        with self._lock:
            self._count += n
        self._local.count = getattr(self._local, "count", 0) + n

    @property
    def count(self) -> int:
        with self._lock:
            return self._count

    @property
    def thread_count(self) -> int:
        return getattr(self._local, "count", 0)


class ScoreModel(ABC):
    """eps-prediction interface shared by the oracle and the trained networks."""

    def __init__(self, dim: int):
        self.dim = dim
        self.nfe_counter = NFECounter()

    @property
    def nfe(self) -> int:
        return self.nfe_counter.count

    def eval(self, x: np.ndarray, t: int, condition: Condition = None) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape != (self.dim,):
            raise ParameterError(f"expected a vector of dimension {self.dim}, got shape {x.shape}")
        eps = self._predict(x, int(t), condition)
        self.nfe_counter.increment()
        return eps

    @abstractmethod
    def _predict(self, x: np.ndarray, t: int, condition: Condition) -> np.ndarray:
        ...


@dataclass
class GaussianMixture:
    """Isotropic Gaussian mixture; each condition selects a subset of components."""
    weights: np.ndarray
    means: np.ndarray
    sigmas: np.ndarray
    condition_map: Dict[ConditionId, Tuple[int, ...]] = field(default_factory=dict)

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.means = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        self.sigmas = np.asarray(self.sigmas, dtype=np.float64)
        k = len(self.weights)
        if self.means.shape[0] != k or self.sigmas.shape != (k,):
            raise ParameterError("weights, means and sigmas must describe the same components")
        if np.any(self.weights <= 0) or not math.isclose(self.weights.sum(), 1.0, rel_tol=1e-9):
            raise ParameterError("mixture weights must be positive and sum to 1")
        if np.any(self.sigmas <= 0):
            raise ParameterError("mixture sigmas must be positive")
        for condition, indices in self.condition_map.items():
            if not indices or any(not 0 <= i < k for i in indices):
                raise ParameterError(f"condition {condition.label()} maps to invalid components {indices}")

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def conditions(self) -> List[ConditionId]:
        return list(self.condition_map)

    def component_indices(self, condition: Condition) -> np.ndarray:
        if condition is None:
            return np.arange(len(self.weights))
        indices = self.condition_map.get(condition)
        if not indices:
            raise ParameterError(f"condition {condition.label()} selects no mixture components")
        return np.asarray(indices)

    def mode(self, condition: Condition) -> np.ndarray:
        """Mean of the heaviest component the condition selects."""
        idx = self.component_indices(condition)
        return self.means[idx[np.argmax(self.weights[idx])]].copy()

    def to_dict(self) -> dict:
        return {
            "schema": MIXTURE_SCHEMA,
            "weights": self.weights.tolist(),
            "means": self.means.tolist(),
            "sigmas": self.sigmas.tolist(),
            "conditions": [
                {"condition": cond.model_dump(mode="json"), "components": list(indices)}
                for cond, indices in self.condition_map.items()
            ],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "GaussianMixture":
        if data.get("schema") != MIXTURE_SCHEMA:
            raise ArtifactError(f"unsupported mixture schema {data.get('schema')!r}")
        condition_map = {
            ConditionId.model_validate(entry["condition"]): tuple(entry["components"])
            for entry in data.get("conditions", [])
        }
        return cls(data["weights"], data["means"], data["sigmas"], condition_map)


def _marginal_terms(mixture: GaussianMixture, schedule: NoiseSchedule, x: np.ndarray, t: int, condition: Condition):
    """Per-component log-densities of p_t and the offsets (sqrt(a) mu - x)."""
    t = schedule.check_t(t)
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (mixture.dim,):
        raise ParameterError(f"expected a vector of dimension {mixture.dim}, got shape {x.shape}")
    idx = mixture.component_indices(condition)
    a = schedule.alpha_bars[t]
    weights = mixture.weights[idx] / mixture.weights[idx].sum()
    sigmas = np.maximum(mixture.sigmas[idx], SIGMA_FLOOR)
    var = a * sigmas**2 + (1.0 - a)
    diff = math.sqrt(a) * mixture.means[idx] - x
    log_comp = (
        np.log(weights)
        - 0.5 * mixture.dim * np.log(2.0 * math.pi * var)
        - 0.5 * np.einsum("kd,kd->k", diff, diff) / var
    )
    return log_comp, diff, var


def log_marginal_density(
    mixture: GaussianMixture, schedule: NoiseSchedule, x: np.ndarray, t: int, condition: Condition = None
) -> float:
    log_comp, _, _ = _marginal_terms(mixture, schedule, x, t, condition)
    return float(logsumexp(log_comp))


def analytic_eps(
    mixture: GaussianMixture, schedule: NoiseSchedule, x: np.ndarray, t: int, condition: Condition = None
) -> np.ndarray:
    """Exact eps = -sqrt(1 - a_t) * grad log p_t(x)."""
    log_comp, diff, var = _marginal_terms(mixture, schedule, x, t, condition)
    resp = softmax(log_comp)
    score = (resp / var) @ diff
    return -math.sqrt(1.0 - schedule.alpha_bars[t]) * score


class MixtureScoreModel(ScoreModel):
    """The closed-form oracle wrapped as a ScoreModel."""

    def __init__(self, mixture: GaussianMixture, schedule: NoiseSchedule):
        super().__init__(mixture.dim)
        self.mixture = mixture
        self.schedule = schedule

    def _predict(self, x: np.ndarray, t: int, condition: Condition) -> np.ndarray:
        return analytic_eps(self.mixture, self.schedule, x, t, condition)


@dataclass
class LabeledSamples:
    x: np.ndarray
    conditions: List[Condition]

    def __len__(self) -> int:
        return self.x.shape[0]


def sample_mixture(
    mixture: GaussianMixture, n: int, rng: np.random.Generator, condition: Condition = None
) -> np.ndarray:
    idx = mixture.component_indices(condition)
    weights = mixture.weights[idx] / mixture.weights[idx].sum()
    picks = idx[rng.choice(len(idx), size=n, p=weights)]
    noise = rng.standard_normal((n, mixture.dim))
    return mixture.means[picks] + mixture.sigmas[picks, None] * noise


def sample_labeled_dataset(mixture: GaussianMixture, n_per_condition: int, rng: np.random.Generator) -> LabeledSamples:
    """Draw n samples per condition (or unconditionally when the map is empty)."""
    conditions: Sequence[Condition] = mixture.conditions or [None]
    xs, labels = [], []
    for condition in conditions:
        xs.append(sample_mixture(mixture, n_per_condition, rng, condition))
        labels.extend([condition] * n_per_condition)
    return LabeledSamples(np.concatenate(xs, axis=0), labels)


def save_mixture(mixture: GaussianMixture, path: str) -> None:
    with open(path, "w") as fh:
        json.dump(mixture.to_dict(), fh)


def load_mixture(path: str) -> GaussianMixture:
    try:
        with open(path) as fh:
            return GaussianMixture.from_dict(json.load(fh))
    except (OSError, json.JSONDecodeError, KeyError) as e:
        raise ArtifactError(f"could not read mixture {path}: {e}") from e

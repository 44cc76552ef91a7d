"""
A tiny fully-connected eps-predictor with hand-written reverse-mode gradients.

Input is [x, sinusoidal(t)]; the condition enters as an additive embedding on
the first hidden layer, row 0 being the unconditional slot.
"""
from __future__ import annotations

import copy
import json
import logging
import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import expit
from tqdm import tqdm

from config.settings import DenoiserConfig
from src.diffusion.schedule import NoiseSchedule
from src.diffusion.score_models import Condition, ConditionId, LabeledSamples, ScoreModel
from src.errors import ArtifactError, ParameterError, TrainingError

logger = logging.getLogger(__name__)

DENOISER_SCHEMA = "pcds-lab/denoiser@1"

Params = Dict[str, np.ndarray]


def time_features(t: np.ndarray, n_freqs: int, T: int) -> np.ndarray:
    """Sinusoidal embedding of integer timesteps, shape (B, 2 * n_freqs)."""
    t = np.asarray(t, dtype=np.float64).reshape(-1, 1) / T
    freqs = np.exp(np.linspace(0.0, math.log(1000.0), n_freqs)) * math.pi
    args = t * freqs[None, :]
    return np.concatenate([np.sin(args), np.cos(args)], axis=1)


def _silu(z: np.ndarray) -> np.ndarray:
    return z * expit(z)


def _silu_grad(z: np.ndarray) -> np.ndarray:
    s = expit(z)
    return s * (1.0 + z * (1.0 - s))


@dataclass
class ForwardCache:
    inputs: np.ndarray
    pre: List[np.ndarray]
    post: List[np.ndarray]
    cond_idx: np.ndarray


class ToyDenoiser(ScoreModel):
    def __init__(self, dim: int, conditions: Sequence[ConditionId], params: Params, n_freqs: int, T: int):
        super().__init__(dim)
        self.conditions = list(conditions)
        self.params = params
        self.n_freqs = n_freqs
        self.T = T
        self._cond_index = {c: i + 1 for i, c in enumerate(self.conditions)}

    @property
    def depth(self) -> int:
        return 1 + sum(1 for name in self.params if name.startswith("W_h"))

    @classmethod
    def initialize(
        cls,
        dim: int,
        conditions: Sequence[ConditionId],
        config: DenoiserConfig,
        T: int,
        rng: np.random.Generator,
    ) -> "ToyDenoiser":
        width = config.width
        n_in = dim + 2 * config.n_freqs
        params: Params = {
            "W_in": rng.standard_normal((n_in, width)) / math.sqrt(n_in),
            "b_in": np.zeros(width),
            "embed": 0.1 * rng.standard_normal((len(conditions) + 1, width)),
        }
        for layer in range(1, config.depth):
            params[f"W_h{layer}"] = rng.standard_normal((width, width)) / math.sqrt(width)
            params[f"b_h{layer}"] = np.zeros(width)
        params["W_out"] = 0.1 * rng.standard_normal((width, dim)) / math.sqrt(width)
        params["b_out"] = np.zeros(dim)
        return cls(dim, conditions, params, config.n_freqs, T)

    def copy(self) -> "ToyDenoiser":
        return ToyDenoiser(self.dim, self.conditions, copy.deepcopy(self.params), self.n_freqs, self.T)

    def condition_index(self, condition: Condition) -> int:
        if condition is None:
            return 0
        try:
            return self._cond_index[condition]
        except KeyError:
            raise ParameterError(f"denoiser was not trained on condition {condition.label()}") from None

    def forward_batch(self, x: np.ndarray, t: np.ndarray, cond_idx: np.ndarray) -> Tuple[np.ndarray, ForwardCache]:
        p = self.params
        inputs = np.concatenate([x, time_features(t, self.n_freqs, self.T)], axis=1)
        h = inputs @ p["W_in"] + p["b_in"] + p["embed"][cond_idx]
        pre, post = [h], [_silu(h)]
        for layer in range(1, self.depth):
            h = post[-1] @ p[f"W_h{layer}"] + p[f"b_h{layer}"]
            pre.append(h)
            post.append(_silu(h))
        out = post[-1] @ p["W_out"] + p["b_out"]
        return out, ForwardCache(inputs, pre, post, np.asarray(cond_idx))

    def backward(self, cache: ForwardCache, grad_out: np.ndarray) -> Params:
        """Parameter gradients of sum(grad_out * output)."""
        p = self.params
        grads: Params = {
            "W_out": cache.post[-1].T @ grad_out,
            "b_out": grad_out.sum(axis=0),
        }
        d_post = grad_out @ p["W_out"].T
        for layer in range(self.depth - 1, 0, -1):
            d_pre = d_post * _silu_grad(cache.pre[layer])
            grads[f"W_h{layer}"] = cache.post[layer - 1].T @ d_pre
            grads[f"b_h{layer}"] = d_pre.sum(axis=0)
            d_post = d_pre @ p[f"W_h{layer}"].T
        d_pre = d_post * _silu_grad(cache.pre[0])
        grads["W_in"] = cache.inputs.T @ d_pre
        grads["b_in"] = d_pre.sum(axis=0)
        embed = np.zeros_like(p["embed"])
        np.add.at(embed, cache.cond_idx, d_pre)
        grads["embed"] = embed
        return grads

    def _predict(self, x: np.ndarray, t: int, condition: Condition) -> np.ndarray:
        out, _ = self.forward_batch(x[None, :], np.array([t]), np.array([self.condition_index(condition)]))
        return out[0]

    def to_dict(self) -> dict:
        return {
            "schema": DENOISER_SCHEMA,
            "dim": self.dim,
            "n_freqs": self.n_freqs,
            "T": self.T,
            "conditions": [c.model_dump(mode="json") for c in self.conditions],
            "layers": [
                {"name": name, "shape": list(value.shape), "weights": value.ravel().tolist()}
                for name, value in self.params.items()
            ],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ToyDenoiser":
        if data.get("schema") != DENOISER_SCHEMA:
            raise ArtifactError(f"unsupported checkpoint schema {data.get('schema')!r}")
        params = {
            layer["name"]: np.asarray(layer["weights"], dtype=np.float64).reshape(layer["shape"])
            for layer in data["layers"]
        }
        conditions = [ConditionId.model_validate(c) for c in data["conditions"]]
        return cls(data["dim"], conditions, params, data["n_freqs"], data["T"])


class Adam:
    """Minimal Adam over a parameter dict."""

    def __init__(self, params: Params, lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.step_count = 0

    def step(self, params: Params, grads: Params) -> None:
        self.step_count += 1
        c1 = 1.0 - self.b1**self.step_count
        c2 = 1.0 - self.b2**self.step_count
        for name, grad in grads.items():
            self.m[name] = self.b1 * self.m[name] + (1.0 - self.b1) * grad
            self.v[name] = self.b2 * self.v[name] + (1.0 - self.b2) * grad**2
            params[name] -= self.lr * (self.m[name] / c1) / (np.sqrt(self.v[name] / c2) + self.eps)


def train_toy_denoiser(dataset: LabeledSamples, schedule: NoiseSchedule, config: DenoiserConfig) -> ToyDenoiser:
    """Fit eps_phi with the denoising loss ||eps - eps_phi(x_t, t, y)||^2."""
    if len(dataset) == 0:
        raise ParameterError("training dataset is empty")
    rng = np.random.default_rng(config.seed)
    conditions = sorted({c for c in dataset.conditions if c is not None}, key=lambda c: c.label())
    model = ToyDenoiser.initialize(dataset.x.shape[1], conditions, config, schedule.T, rng)
    labels = np.array([model.condition_index(c) for c in dataset.conditions])
    optimizer = Adam(model.params, config.learning_rate)
    sqrt_ab = np.sqrt(schedule.alpha_bars)
    sqrt_1m_ab = np.sqrt(1.0 - schedule.alpha_bars)

    for iteration in tqdm(range(config.iterations), desc="train denoiser", disable=config.iterations == 0):
        idx = rng.integers(0, len(dataset), size=config.batch_size)
        x0 = dataset.x[idx]
        cond_idx = np.where(rng.random(config.batch_size) < config.p_uncond, 0, labels[idx])
        t = rng.integers(1, schedule.T + 1, size=config.batch_size)
        noise = rng.standard_normal(x0.shape)
        xt = sqrt_ab[t, None] * x0 + sqrt_1m_ab[t, None] * noise

        pred, cache = model.forward_batch(xt, t, cond_idx)
        err = pred - noise
        loss = float(np.mean(np.sum(err**2, axis=1)))
        if not math.isfinite(loss):
            raise TrainingError("denoiser loss is not finite", iteration)
        optimizer.step(model.params, model.backward(cache, 2.0 * err / config.batch_size))
        if iteration % max(1, config.iterations // 10) == 0:
            logger.debug("denoiser iteration %d loss %.5f", iteration, loss)

    return model


def save_denoiser(model: ToyDenoiser, path: str) -> None:
    with open(path, "w") as fh:
        json.dump(model.to_dict(), fh)


def load_denoiser(path: str) -> ToyDenoiser:
    try:
        with open(path) as fh:
            return ToyDenoiser.from_dict(json.load(fh))
    except (OSError, json.JSONDecodeError, KeyError) as e:
        raise ArtifactError(f"could not read checkpoint {path}: {e}") from e

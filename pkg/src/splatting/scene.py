"""
Gaussian-splat scenes.

Parameters are stored unconstrained: log-scales, a raw rotation (angle in
2D, unnormalized quaternion in 3D) and an opacity logit. The covariance
R diag(s^2) R^T is therefore positive definite by construction.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Optional

import numpy as np
from scipy.special import expit, logit

from src.errors import ArtifactError, ConfigError, ParameterError

SCENE_SCHEMA = "pcds-lab/scene@1"
SPLT_MAGIC = b"SPLT1"

PARAM_GROUPS = ("position", "scale", "rotation", "color", "opacity")


def rotation_2d(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, -s], [s, c]])


def quaternion_matrix(q: np.ndarray) -> np.ndarray:
    """Rotation matrix of a unit quaternion (w, x, y, z)."""
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def rotation_matrix(raw: np.ndarray) -> np.ndarray:
    raw = np.asarray(raw, dtype=np.float64)
    if raw.shape == (1,):
        return rotation_2d(float(raw[0]))
    norm = np.linalg.norm(raw)
    if raw.shape != (4,) or norm == 0.0:
        raise ParameterError(f"rotation must be an angle or a nonzero quaternion, got {raw}")
    return quaternion_matrix(raw / norm)


@dataclass
class Splat:
    position: np.ndarray
    log_scale: np.ndarray
    rotation: np.ndarray
    color: np.ndarray
    opacity_logit: float
    depth: float = 0.0

    @property
    def scale(self) -> np.ndarray:
        return np.exp(self.log_scale)

    @property
    def opacity(self) -> float:
        return float(expit(self.opacity_logit))

    def covariance(self) -> np.ndarray:
        R = rotation_matrix(self.rotation)
        return R @ np.diag(self.scale**2) @ R.T


@dataclass
class SplatScene:
    """Struct-of-arrays scene; row i of every array belongs to splat i."""
    positions: np.ndarray
    log_scales: np.ndarray
    rotations: np.ndarray
    colors: np.ndarray
    opacity_logits: np.ndarray
    depths: np.ndarray
    background: np.ndarray = field(default_factory=lambda: np.ones(3))

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64)
        if self.positions.ndim != 2:
            raise ParameterError(f"positions must be an (N, d) array, got shape {self.positions.shape}")
        n, d = self.positions.shape
        if d not in (2, 3):
            raise ParameterError(f"splat positions must be 2D or 3D, got dimension {d}")
        self.log_scales = np.asarray(self.log_scales, dtype=np.float64).reshape(n, d)
        self.rotations = np.asarray(self.rotations, dtype=np.float64).reshape(n, 1 if d == 2 else 4)
        self.colors = np.asarray(self.colors, dtype=np.float64).reshape(n, 3)
        self.opacity_logits = np.asarray(self.opacity_logits, dtype=np.float64).reshape(n)
        self.depths = np.asarray(self.depths, dtype=np.float64).reshape(n)
        self.background = np.asarray(self.background, dtype=np.float64).reshape(3)

    @classmethod
    def empty(cls, dim: int = 2, background=(1.0, 1.0, 1.0)) -> "SplatScene":
        rot = 1 if dim == 2 else 4
        return cls(np.zeros((0, dim)), np.zeros((0, dim)), np.zeros((0, rot)), np.zeros((0, 3)),
                   np.zeros(0), np.zeros(0), np.asarray(background, dtype=np.float64))

    @classmethod
    def from_splats(cls, splats: List[Splat], background=(1.0, 1.0, 1.0), dim: Optional[int] = None) -> "SplatScene":
        if not splats:
            return cls.empty(dim or 2, background)
        return cls(
            np.stack([s.position for s in splats]),
            np.stack([s.log_scale for s in splats]),
            np.stack([s.rotation for s in splats]),
            np.stack([s.color for s in splats]),
            np.array([s.opacity_logit for s in splats]),
            np.array([s.depth for s in splats]),
            np.asarray(background, dtype=np.float64),
        )

    def __len__(self) -> int:
        return self.positions.shape[0]

    @property
    def dim(self) -> int:
        return self.positions.shape[1]

    @property
    def mode(self) -> str:
        return "2d" if self.dim == 2 else "3d"

    @property
    def splats(self) -> List[Splat]:
        return [self.splat(i) for i in range(len(self))]

    def splat(self, i: int) -> Splat:
        return Splat(
            self.positions[i].copy(),
            self.log_scales[i].copy(),
            self.rotations[i].copy(),
            self.colors[i].copy(),
            float(self.opacity_logits[i]),
            float(self.depths[i]),
        )

    def opacities(self) -> np.ndarray:
        return expit(self.opacity_logits)

    def rotation_matrices(self) -> np.ndarray:
        return np.stack([rotation_matrix(r) for r in self.rotations]) if len(self) else np.zeros((0, self.dim, self.dim))

    def covariances(self) -> np.ndarray:
        R = self.rotation_matrices()
        s2 = np.exp(2.0 * self.log_scales)
        return np.einsum("nij,nj,nkj->nik", R, s2, R)

    def groups(self) -> Dict[str, np.ndarray]:
        return {
            "position": self.positions,
            "scale": self.log_scales,
            "rotation": self.rotations,
            "color": self.colors,
            "opacity": self.opacity_logits,
        }

    def copy(self) -> "SplatScene":
        return SplatScene(
            self.positions.copy(), self.log_scales.copy(), self.rotations.copy(), self.colors.copy(),
            self.opacity_logits.copy(), self.depths.copy(), self.background.copy(),
        )

    def to_vector(self) -> np.ndarray:
        """theta: every learnable group flattened in PARAM_GROUPS order."""
        return np.concatenate([g.ravel() for g in self.groups().values()])

    def with_vector(self, theta: np.ndarray) -> "SplatScene":
        theta = np.asarray(theta, dtype=np.float64)
        scene = self.copy()
        offset = 0
        for value in scene.groups().values():
            size = value.size
            if offset + size > theta.size:
                raise ParameterError(f"parameter vector too short: {theta.size}")
            value[...] = theta[offset:offset + size].reshape(value.shape)
            offset += size
        if offset != theta.size:
            raise ParameterError(f"parameter vector has {theta.size} entries, scene needs {offset}")
        return scene

    def to_dict(self) -> dict:
        return {
            "schema": SCENE_SCHEMA,
            "dim": self.dim,
            "background": self.background.tolist(),
            "splats": [
                {
                    "position": s.position.tolist(),
                    "log_scale": s.log_scale.tolist(),
                    "rotation": s.rotation.tolist(),
                    "color": s.color.tolist(),
                    "opacity_logit": s.opacity_logit,
                    "depth": s.depth,
                }
                for s in self.splats
            ],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "SplatScene":
        if data.get("schema") != SCENE_SCHEMA:
            raise ArtifactError(f"unsupported scene schema {data.get('schema')!r}")
        splats = [
            Splat(
                np.asarray(s["position"], dtype=np.float64),
                np.asarray(s["log_scale"], dtype=np.float64),
                np.asarray(s["rotation"], dtype=np.float64),
                np.asarray(s["color"], dtype=np.float64),
                float(s["opacity_logit"]),
                float(s.get("depth", 0.0)),
            )
            for s in data["splats"]
        ]
        return cls.from_splats(splats, data["background"], dim=data["dim"])


@dataclass
class SplatGradients:
    """Gradients laid out like SplatScene.groups(); scale and opacity are w.r.t. log-scale and logit."""
    position: np.ndarray
    scale: np.ndarray
    rotation: np.ndarray
    color: np.ndarray
    opacity: np.ndarray

    @classmethod
    def zeros_like(cls, scene: SplatScene) -> "SplatGradients":
        return cls(**{name: np.zeros_like(value) for name, value in scene.groups().items()})

    def items(self) -> Iterator:
        for name in PARAM_GROUPS:
            yield name, getattr(self, name)

    def to_vector(self) -> np.ndarray:
        return np.concatenate([value.ravel() for _, value in self.items()])

    def norm(self) -> float:
        return float(np.linalg.norm(self.to_vector()))

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(value)) for _, value in self.items())

    def __add__(self, other: "SplatGradients") -> "SplatGradients":
        return SplatGradients(**{name: value + getattr(other, name) for name, value in self.items()})

    def scaled(self, factor: float) -> "SplatGradients":
        return SplatGradients(**{name: factor * value for name, value in self.items()})

    def to_dict(self) -> dict:
        return {name: value.tolist() for name, value in self.items()}


def save_scene(scene: SplatScene, path: str) -> None:
    """JSON when the path ends in .json, the SPLT1 binary otherwise."""
    try:
        if path.endswith(".json"):
            with open(path, "w") as fh:
                json.dump(scene.to_dict(), fh)
        else:
            with open(path, "wb") as fh:
                fh.write(encode_splt(scene))
    except OSError as e:
        raise ArtifactError(f"could not write scene {path}: {e}") from e


def load_scene(path: str) -> SplatScene:
    try:
        if path.endswith(".json"):
            with open(path) as fh:
                return SplatScene.from_dict(json.load(fh))
        with open(path, "rb") as fh:
            return decode_splt(fh.read())
    except (OSError, json.JSONDecodeError, KeyError, struct.error) as e:
        raise ArtifactError(f"could not read scene {path}: {e}") from e


def encode_splt(scene: SplatScene) -> bytes:
    """SPLT1 layout, little-endian:

        magic  b"SPLT1"
        u8     dimension (2 or 3)
        u32    splat count N
        f32x3  background
        then the field arrays at f32: positions N*d, log_scales N*d,
        rotations N*r (r = 1 or 4), colors N*3, opacity_logits N, depths N
    """
    header = SPLT_MAGIC + struct.pack("<BI", scene.dim, len(scene))
    arrays = [scene.background, scene.positions, scene.log_scales, scene.rotations,
              scene.colors, scene.opacity_logits, scene.depths]
    return header + b"".join(np.asarray(a, dtype="<f4").tobytes() for a in arrays)


def decode_splt(blob: bytes) -> SplatScene:
    if not blob.startswith(SPLT_MAGIC):
        raise ArtifactError("not a SPLT1 scene file")
    offset = len(SPLT_MAGIC)
    dim, n = struct.unpack_from("<BI", blob, offset)
    offset += struct.calcsize("<BI")
    if dim not in (2, 3):
        raise ArtifactError(f"SPLT1 dimension must be 2 or 3, got {dim}")
    rot = 1 if dim == 2 else 4
    sizes = [3, n * dim, n * dim, n * rot, n * 3, n, n]
    expected = offset + 4 * sum(sizes)
    if len(blob) != expected:
        raise ArtifactError(f"SPLT1 payload has {len(blob)} bytes, expected {expected}")
    arrays = []
    for size in sizes:
        arrays.append(np.frombuffer(blob, dtype="<f4", count=size, offset=offset).astype(np.float64))
        offset += 4 * size
    background, positions, log_scales, rotations, colors, opacity_logits, depths = arrays
    return SplatScene(
        positions.reshape(n, dim), log_scales.reshape(n, dim), rotations.reshape(n, rot),
        colors.reshape(n, 3), opacity_logits, depths, background,
    )


def _grid_points(count: int, radius: float) -> np.ndarray:
    side = math.ceil(math.sqrt(count))
    axis = np.linspace(-radius, radius, side)
    xx, yy = np.meshgrid(axis, axis)
    return np.stack([xx.ravel(), yy.ravel()], axis=1)[:count]


def _disk_points(count: int, radius: float, rng: np.random.Generator) -> np.ndarray:
    r = radius * np.sqrt(rng.random(count))
    theta = rng.uniform(0.0, 2.0 * math.pi, count)
    return np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1)


def _annulus_points(count: int, radius: float, inner: float, rng: np.random.Generator) -> np.ndarray:
    if not 0.0 <= inner < radius:
        raise ConfigError(f"annulus needs 0 <= inner_radius < radius, got {inner}, {radius}")
    # area-uniform radii between the two circles
    r = np.sqrt(rng.uniform(inner**2, radius**2, count))
    theta = rng.uniform(0.0, 2.0 * math.pi, count)
    return np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1)


def _shell_points(count: int, radius: float, dim: int) -> np.ndarray:
    if dim == 2:
        theta = 2.0 * math.pi * np.arange(count) / count
        return radius * np.stack([np.cos(theta), np.sin(theta)], axis=1)
    # Fibonacci lattice on the sphere
    k = np.arange(count) + 0.5
    z = 1.0 - 2.0 * k / count
    rho = np.sqrt(1.0 - z**2)
    phi = math.pi * (3.0 - math.sqrt(5.0)) * k
    return radius * np.stack([rho * np.cos(phi), rho * np.sin(phi), z], axis=1)


PRIMITIVES = ("grid", "disk", "sphere_shell", "annulus")


def init_scene(spec, background=(1.0, 1.0, 1.0)) -> SplatScene:
    """Deterministic primitive layout with small isotropic mid-gray splats.

    spec is a SceneInitSpec (primitive, count, mode, radius, inner_radius,
    init_scale, seed). Planar primitives sit in the z = 0 plane in 3D mode.
    """
    if spec.primitive not in PRIMITIVES:
        raise ConfigError(f"unknown primitive '{spec.primitive}' (choose from {', '.join(PRIMITIVES)})")
    dim = 2 if spec.mode == "2d" else 3
    rng = np.random.default_rng(spec.seed)
    n = spec.count

    if spec.primitive == "grid":
        points = _grid_points(n, spec.radius)
    elif spec.primitive == "disk":
        points = _disk_points(n, spec.radius, rng)
    elif spec.primitive == "annulus":
        points = _annulus_points(n, spec.radius, spec.inner_radius, rng)
    else:
        points = _shell_points(n, spec.radius, dim)
    if points.shape[1] < dim:
        points = np.concatenate([points, np.zeros((n, dim - points.shape[1]))], axis=1)

    rotations = np.zeros((n, 1)) if dim == 2 else np.tile([1.0, 0.0, 0.0, 0.0], (n, 1))
    return SplatScene(
        positions=points,
        log_scales=np.full((n, dim), math.log(spec.init_scale)),
        rotations=rotations,
        colors=np.full((n, 3), 0.5),
        opacity_logits=np.full(n, float(logit(0.5))),
        depths=np.arange(n, dtype=np.float64) / max(n, 1),
        background=np.asarray(background, dtype=np.float64),
    )


def random_scene(
    n: int,
    dim: int,
    rng: np.random.Generator,
    extent: float = 0.7,
    scale_range=(0.05, 0.25),
    background=(1.0, 1.0, 1.0),
) -> SplatScene:
    """Random anisotropic colored splats; benchmark targets and gradient checks use these."""
    rot = rng.uniform(-math.pi, math.pi, (n, 1)) if dim == 2 else rng.standard_normal((n, 4))
    return SplatScene(
        positions=rng.uniform(-extent, extent, (n, dim)),
        log_scales=np.log(rng.uniform(*scale_range, (n, dim))),
        rotations=rot,
        colors=rng.uniform(0.0, 1.0, (n, 3)),
        opacity_logits=rng.uniform(-1.0, 2.0, n),
        depths=rng.permutation(n).astype(np.float64),
        background=np.asarray(background, dtype=np.float64),
    )

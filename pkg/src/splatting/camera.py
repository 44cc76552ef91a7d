"""
Cameras for the splat renderer.

Projection is affine (weak perspective): a splat centre maps to pixels by
mu' = J W mu + o, where W is the view rotation, J the per-camera 2 x d
Jacobian and o the image centre. In 2D mode splats already live in the image
plane, so W = I and J rescales [-1, 1] to pixels.
"""
import json
import math
from dataclasses import dataclass
from typing import List, Tuple

import numpy as np

from src.errors import ArtifactError, ParameterError

DEFAULT_FOV = math.radians(30.0)


@dataclass(frozen=True)
class CameraPose:
    azimuth: float
    elevation: float
    radius: float
    image_size: Tuple[int, int]
    view: np.ndarray
    jacobian: np.ndarray

    def __post_init__(self):
        d = self.view.shape[0]
        if self.view.shape != (d, d) or not np.allclose(self.view @ self.view.T, np.eye(d), atol=1e-9):
            raise ParameterError("view transform must be an orthonormal rotation")
        if self.jacobian.shape != (2, d) or not np.all(np.isfinite(self.jacobian)):
            raise ParameterError(f"projection Jacobian must be a finite 2x{d} matrix")

    @property
    def dim(self) -> int:
        return self.view.shape[0]

    @property
    def height(self) -> int:
        return self.image_size[0]

    @property
    def width(self) -> int:
        return self.image_size[1]

    @property
    def projection(self) -> np.ndarray:
        """M = J W, the full linear part of the splat-centre projection."""
        return self.jacobian @ self.view

    @property
    def offset(self) -> np.ndarray:
        return np.array([self.width / 2.0, self.height / 2.0])

    def project(self, positions: np.ndarray) -> np.ndarray:
        """Pixel coordinates (u along width, v along height) of splat centres."""
        return positions @ self.projection.T + self.offset

    def depth(self, positions: np.ndarray) -> np.ndarray:
        """Distance along the viewing axis; only defined for orbit cameras."""
        return self.radius - positions @ self.view[2]

    def to_dict(self) -> dict:
        return {
            "azimuth": self.azimuth,
            "elevation": self.elevation,
            "radius": self.radius,
            "image_size": list(self.image_size),
            "dim": self.dim,
        }


def image_plane_camera(image_size: Tuple[int, int], azimuth: float = 0.0, elevation: float = 0.0) -> CameraPose:
    """2D-mode camera; azimuth/elevation are only carried for view binding."""
    h, w = image_size
    return CameraPose(
        azimuth=azimuth,
        elevation=elevation,
        radius=1.0,
        image_size=(h, w),
        view=np.eye(2),
        jacobian=np.diag([w / 2.0, h / 2.0]),
    )


def orbit_rotation(azimuth: float, elevation: float) -> np.ndarray:
    """Rows are the camera's right, up and toward-camera axes; azimuth 0 sits on +z."""
    ca, sa = math.cos(azimuth), math.sin(azimuth)
    ce, se = math.cos(elevation), math.sin(elevation)
    right = [ca, 0.0, -sa]
    up = [-se * sa, ce, -se * ca]
    toward = [ce * sa, se, ce * ca]
    return np.array([right, up, toward])


def orbit_camera(
    azimuth: float,
    elevation: float,
    radius: float,
    image_size: Tuple[int, int],
    fov: float = DEFAULT_FOV,
) -> CameraPose:
    if radius <= 0:
        raise ParameterError(f"camera radius must be positive, got {radius}")
    h, w = image_size
    extent = radius * math.tan(fov / 2.0)
    # image rows grow downward, scene y grows upward
    jacobian = np.array([[w / (2.0 * extent), 0.0, 0.0], [0.0, -h / (2.0 * extent), 0.0]])
    return CameraPose(azimuth, elevation, radius, (h, w), orbit_rotation(azimuth, elevation), jacobian)


def camera_for_mode(
    mode: str,
    azimuth: float,
    elevation: float,
    radius: float,
    image_size: Tuple[int, int],
) -> CameraPose:
    if mode == "2d":
        return image_plane_camera(image_size, azimuth, elevation)
    if mode == "3d":
        return orbit_camera(azimuth, elevation, radius, image_size)
    raise ParameterError(f"unknown scene mode '{mode}'")


def sample_pose(
    rng: np.random.Generator,
    mode: str,
    radius: float,
    image_size: Tuple[int, int],
    elevation_range_deg: Tuple[float, float] = (-30.0, 30.0),
) -> CameraPose:
    """Uniform azimuth, uniform elevation in the given range, fixed radius."""
    azimuth = float(rng.uniform(-math.pi, math.pi))
    lo, hi = elevation_range_deg
    elevation = math.radians(float(rng.uniform(lo, hi)))
    return camera_for_mode(mode, azimuth, elevation, radius, image_size)


def turntable_path(
    n_frames: int, elevation: float, radius: float, image_size: Tuple[int, int], mode: str = "3d"
) -> List[CameraPose]:
    if n_frames < 1:
        raise ParameterError(f"n_frames must be >= 1, got {n_frames}")
    return [
        camera_for_mode(mode, 2.0 * math.pi * k / n_frames, elevation, radius, image_size)
        for k in range(n_frames)
    ]


def save_camera_path(cameras: List[CameraPose], path: str) -> None:
    with open(path, "w") as fh:
        json.dump([c.to_dict() for c in cameras], fh, indent=2)


def load_camera_path(path: str) -> List[CameraPose]:
    try:
        with open(path) as fh:
            entries = json.load(fh)
        return [
            camera_for_mode(
                "2d" if e["dim"] == 2 else "3d",
                e["azimuth"],
                e["elevation"],
                e["radius"],
                tuple(e["image_size"]),
            )
            for e in entries
        ]
    except (OSError, json.JSONDecodeError, KeyError) as e:
        raise ArtifactError(f"could not read camera path {path}: {e}") from e

"""
Front-to-back alpha compositing of projected Gaussians and its analytic
reverse pass.

Per pixel p, splat i contributes sigma_i = alpha_i * exp(-1/2 d^T A_i d)
with d = p - mu'_i and A_i = (Sigma'_i + floor I)^-1, weighted by the
transmittance T_i = prod_{j < i} (1 - sigma_j). Pixels whose transmittance
falls below min_transmittance stop accepting splats.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from src.errors import ParameterError
from src.splatting.camera import CameraPose
from src.splatting.scene import Splat, SplatGradients, SplatScene

logger = logging.getLogger(__name__)

COV_FLOOR = 1e-6
MIN_TRANSMITTANCE = 1e-4


def eval_gaussian(splat: Splat, p: np.ndarray) -> float:
    """Unnormalized density exp(-1/2 p^T Sigma^-1 p) at offset p."""
    p = np.asarray(p, dtype=np.float64)
    return float(np.exp(-0.5 * p @ np.linalg.solve(splat.covariance(), p)))


def project_covariance(cov: np.ndarray, W: np.ndarray, J: np.ndarray) -> np.ndarray:
    """Sigma' = J W Sigma W^T J^T, symmetrized; cov may be one matrix or a stack."""
    M = J @ W
    projected = M @ cov @ M.T
    return 0.5 * (projected + np.swapaxes(projected, -1, -2))


@dataclass
class RasterCache:
    order: np.ndarray
    centers: np.ndarray
    conics: np.ndarray
    gauss: np.ndarray
    sigma: np.ndarray
    trans: np.ndarray
    active: np.ndarray
    pixels_xy: np.ndarray


@dataclass
class RenderedView:
    pixels: np.ndarray
    transmittance: np.ndarray
    cache: Optional[RasterCache] = field(default=None, repr=False)

    def flat(self) -> np.ndarray:
        return self.pixels.ravel()


def pixel_centers(camera: CameraPose) -> np.ndarray:
    """(H*W, 2) array of (u, v) pixel centres in row-major order."""
    v, u = np.mgrid[0:camera.height, 0:camera.width]
    return np.stack([u.ravel() + 0.5, v.ravel() + 0.5], axis=1).astype(np.float64)


def depth_order(scene: SplatScene, camera: CameraPose) -> np.ndarray:
    """Front-to-back splat order; ties go to the lower index."""
    if scene.dim != camera.dim:
        raise ParameterError(f"{scene.dim}D scene cannot be viewed by a {camera.dim}D camera")
    keys = scene.depths if scene.dim == 2 else camera.depth(scene.positions)
    return np.lexsort((np.arange(len(scene)), keys))


def render(scene: SplatScene, camera: CameraPose, min_transmittance: float = MIN_TRANSMITTANCE) -> RenderedView:
    order = depth_order(scene, camera)
    pix = pixel_centers(camera)
    n, n_pix = len(scene), pix.shape[0]

    centers = camera.project(scene.positions)
    projected = project_covariance(scene.covariances(), camera.view, camera.jacobian) + COV_FLOOR * np.eye(2)
    conics = np.linalg.inv(projected) if n else np.zeros((0, 2, 2))
    alpha = scene.opacities()

    gauss = np.zeros((n, n_pix))
    sigma = np.zeros((n, n_pix))
    trans = np.zeros((n, n_pix))
    active = np.zeros((n, n_pix), dtype=bool)
    T = np.ones(n_pix)
    color = np.zeros((n_pix, 3))
    for rank, i in enumerate(order):
        d = pix - centers[i]
        g = np.exp(-0.5 * np.einsum("pi,ij,pj->p", d, conics[i], d))
        live = T >= min_transmittance
        s = alpha[i] * g * live
        color += (s * T)[:, None] * scene.colors[i]
        gauss[rank], sigma[rank], trans[rank], active[rank] = g, s, T, live
        T = T * (1.0 - s)
    color += T[:, None] * scene.background

    h, w = camera.height, camera.width
    cache = RasterCache(order, centers, conics, gauss, sigma, trans, active, pix)
    return RenderedView(color.reshape(h, w, 3), T.reshape(h, w), cache)


def _rotation_grad_2d(angle: float, dR: np.ndarray) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([np.sum(dR * np.array([[-s, -c], [c, -s]]))])


def _rotation_grad_quat(raw: np.ndarray, dR: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(raw)
    q = raw / norm
    w, x, y, z = q
    # dR/dw, dR/dx, dR/dy, dR/dz at the unit quaternion
    partials = 2.0 * np.array([
        [[0, -z, y], [z, 0, -x], [-y, x, 0]],
        [[0, y, z], [y, -2 * x, -w], [z, w, -2 * x]],
        [[-2 * y, x, w], [x, 0, z], [-w, z, -2 * y]],
        [[-2 * z, -w, x], [w, -2 * z, y], [x, y, 0]],
    ])
    g_unit = np.einsum("kij,ij->k", partials, dR)
    return (g_unit - q * (q @ g_unit)) / norm


def render_backward(
    scene: SplatScene,
    camera: CameraPose,
    grad_pixels: np.ndarray,
    view: Optional[RenderedView] = None,
    min_transmittance: float = MIN_TRANSMITTANCE,
) -> SplatGradients:
    """Gradients of sum(grad_pixels * render(scene, camera)) w.r.t. every splat parameter.

    Pass the forward view to reuse its raster cache.
    """
    h, w = camera.height, camera.width
    grad_pixels = np.asarray(grad_pixels, dtype=np.float64)
    if grad_pixels.size != h * w * 3:
        raise ParameterError(f"grad_pixels must have {h}x{w}x3 entries, got shape {grad_pixels.shape}")
    G = grad_pixels.reshape(h * w, 3)
    if view is None or view.cache is None:
        view = render(scene, camera, min_transmittance)
    cache = view.cache

    grads = SplatGradients.zeros_like(scene)
    if len(scene) == 0:
        return grads

    M = camera.projection
    alpha = scene.opacities()
    rotations = scene.rotation_matrices()
    behind = np.broadcast_to(scene.background, G.shape).copy()

    for rank in range(len(scene) - 1, -1, -1):
        i = cache.order[rank]
        s, T, g = cache.sigma[rank], cache.trans[rank], cache.gauss[rank]
        c = scene.colors[i]

        grads.color[i] = G.T @ (s * T)
        d_sigma = T * (G @ c - np.einsum("pc,pc->p", G, behind))
        behind = s[:, None] * c + (1.0 - s)[:, None] * behind

        live = cache.active[rank]
        grads.opacity[i] = np.sum(d_sigma * g * live) * alpha[i] * (1.0 - alpha[i])
        d_power = d_sigma * alpha[i] * live * g

        d = cache.pixels_xy - cache.centers[i]
        A = cache.conics[i]
        d_center = d_power @ (d @ A)
        g_conic = -0.5 * np.einsum("p,pi,pj->ij", d_power, d, d)
        g_proj = -A @ g_conic @ A
        g_cov = M.T @ g_proj @ M

        grads.position[i] = M.T @ d_center
        R = rotations[i]
        s2 = np.exp(2.0 * scene.log_scales[i])
        grads.scale[i] = 2.0 * s2 * np.diag(R.T @ g_cov @ R)
        dR = 2.0 * g_cov @ R @ np.diag(s2)
        if scene.dim == 2:
            grads.rotation[i] = _rotation_grad_2d(float(scene.rotations[i, 0]), dR)
        else:
            grads.rotation[i] = _rotation_grad_quat(scene.rotations[i], dR)

    return grads

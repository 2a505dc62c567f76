"""Differentiable rendering of Gaussian splat scenes.

Forward pass: every Gaussian is projected to a screen-space conic (EWA with a
low-pass floor), then pixels composite splats front to back with early
termination. Two rasterization modes produce identical images; REFERENCE
walks every splat per pixel while TILED bins splats into 16x16 tiles first.

Backward pass: given pixel-space gradients, recovers gradients for every
Gaussian parameter (position, rotation, log-scale, opacity, color) by
replaying compositing per pixel and chaining through the projection.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from ..camera import CameraPose, Intrinsics
from ..scene import GaussianSet, Scene
from . import backend
from .backend import (
    active_backend_name,
    available_backends,
    compiled_available,
    set_backend,
)
from .geometry import (
    DEFAULT_BACKGROUND,
    DEFAULT_SIGMA_MIN,
    EARLY_EXIT_TRANSMITTANCE,
    LOW_PASS_PX2,
    SIGMA_MAX,
    composite_pixel,
    compositing_weights,
    covariance_from_params,
    ewa_project,
    quaternion_to_rotation,
    sigma_at,
)
from .types import CULLED, GradientBuffer, RenderedImage, RenderMode, Splat2D

__all__ = [
    "CULLED",
    "DEFAULT_BACKGROUND",
    "DEFAULT_SIGMA_MIN",
    "EARLY_EXIT_TRANSMITTANCE",
    "LOW_PASS_PX2",
    "SIGMA_MAX",
    "GradientBuffer",
    "RenderMode",
    "RenderedImage",
    "Splat2D",
    "active_backend_name",
    "available_backends",
    "backend",
    "compiled_available",
    "composite_pixel",
    "set_backend",
    "compositing_weights",
    "covariance_from_params",
    "ewa_project",
    "quaternion_to_rotation",
    "render",
    "render_backward",
    "sigma_at",
]


def _as_gaussians(scene: Scene | GaussianSet) -> GaussianSet:
    return scene.gaussians if isinstance(scene, Scene) else scene


def _camera_arrays(pose: CameraPose, intrinsics: Intrinsics):
    view = pose.world_to_view()
    cam_rot = np.ascontiguousarray(view[:3, :3], dtype=np.float64)
    cam_t = np.ascontiguousarray(view[:3, 3], dtype=np.float64)
    fx, fy = intrinsics.focal
    cx, cy = intrinsics.principal_point
    return cam_rot, cam_t, float(fx), float(fy), float(cx), float(cy)


def _depth_order(valid: np.ndarray, depth: np.ndarray) -> np.ndarray:
    """Global compositing order: ascending depth, source index breaks ties."""
    order = np.lexsort((np.arange(depth.shape[0]), depth))
    return np.ascontiguousarray(order[valid[order].astype(bool)], dtype=np.int32)


def _resolve_background(background: Sequence[float]) -> np.ndarray:
    bg = np.ascontiguousarray(background, dtype=np.float64)
    if bg.shape != (3,):
        raise ValueError(f"background must be 3 values, got shape {bg.shape}")
    return bg


def render(
    scene: Scene | GaussianSet,
    pose: CameraPose,
    intrinsics: Intrinsics,
    *,
    mode: RenderMode = RenderMode.TILED,
    subset: np.ndarray | None = None,
    background: Sequence[float] = DEFAULT_BACKGROUND,
    sigma_min: float = DEFAULT_SIGMA_MIN,
    early_exit: float = EARLY_EXIT_TRANSMITTANCE,
) -> RenderedImage:
    """Rasterize the scene from one camera.

    `subset` restricts drawing to the given row indices (other Gaussians are
    simply absent). The image dtype follows the parameter arrays.
    """
    gs = _as_gaussians(scene)
    if subset is not None:
        gs = gs.take(np.asarray(subset, dtype=np.int64))
    cam_rot, cam_t, fx, fy, cx, cy = _camera_arrays(pose, intrinsics)
    width, height = intrinsics.width, intrinsics.height
    kern = backend.active_backend()

    valid, mean2d, conic, depth, _, bounds = kern.project(
        gs.positions, gs.rotations, gs.log_scales, gs.opacities,
        cam_rot, cam_t, fx, fy, cx, cy,
        float(intrinsics.near), width, height, float(sigma_min), LOW_PASS_PX2,
    )
    order = _depth_order(valid, depth)
    rasterize = kern.rasterize_reference if mode is RenderMode.REFERENCE else kern.rasterize_tiled
    rgb, transmittance = rasterize(
        order, mean2d, conic, gs.opacities, gs.colors, bounds,
        width, height, float(sigma_min), SIGMA_MAX, float(early_exit),
        _resolve_background(background),
    )
    return RenderedImage(rgb=rgb, transmittance=transmittance)


def render_backward(
    scene: Scene | GaussianSet,
    pose: CameraPose,
    intrinsics: Intrinsics,
    upstream: np.ndarray,
    *,
    subset: np.ndarray | None = None,
    background: Sequence[float] = DEFAULT_BACKGROUND,
    sigma_min: float = DEFAULT_SIGMA_MIN,
    early_exit: float = EARLY_EXIT_TRANSMITTANCE,
) -> GradientBuffer:
    """Pixel gradients (H, W, 3) down to per-Gaussian parameter gradients.

    Returns a buffer sized for the full set; with `subset`, rows outside it
    stay zero. Gradients accumulate in float64 regardless of scene dtype.
    """
    gs_full = _as_gaussians(scene)
    rows = None
    gs = gs_full
    if subset is not None:
        rows = np.asarray(subset, dtype=np.int64)
        gs = gs_full.take(rows)

    width, height = intrinsics.width, intrinsics.height
    up = np.ascontiguousarray(upstream, dtype=np.float64)
    if up.shape != (height, width, 3):
        raise ValueError(f"upstream shape {up.shape} does not match {height}x{width}x3")

    cam_rot, cam_t, fx, fy, cx, cy = _camera_arrays(pose, intrinsics)
    kern = backend.active_backend()
    valid, mean2d, conic, depth, tview, bounds = kern.project(
        gs.positions, gs.rotations, gs.log_scales, gs.opacities,
        cam_rot, cam_t, fx, fy, cx, cy,
        float(intrinsics.near), width, height, float(sigma_min), LOW_PASS_PX2,
    )
    order = _depth_order(valid, depth)
    d_pos, d_rot, d_ls, d_op, d_col = kern.backward(
        order, gs.rotations, gs.log_scales, gs.opacities, gs.colors,
        mean2d, conic, tview, bounds, up, cam_rot, fx, fy,
        width, height, float(sigma_min), SIGMA_MAX, float(early_exit),
        _resolve_background(background),
    )

    grads = GradientBuffer.zeros(gs_full.count, dtype=np.float64)
    if rows is None:
        grads.d_positions[:] = d_pos
        grads.d_rotations[:] = d_rot
        grads.d_log_scales[:] = d_ls
        grads.d_opacities[:] = d_op
        grads.d_colors[:] = d_col
    else:
        grads.d_positions[rows] = d_pos
        grads.d_rotations[rows] = d_rot
        grads.d_log_scales[rows] = d_ls
        grads.d_opacities[rows] = d_op
        grads.d_colors[rows] = d_col
    return grads

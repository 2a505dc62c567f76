"""Reference projection and compositing math, written for clarity over speed.

These scalar/per-splat routines define the semantics the batched kernels
must reproduce; unit tests pin them down with hand-derived values and the
kernels are tested against renders built from them.
"""

from __future__ import annotations

import numpy as np

from compsplat.camera import CameraPose, Intrinsics
from compsplat.rendering.types import CULLED, Splat2D

LOW_PASS_PX2 = 0.3  # anti-aliasing dilation added to cov2d's diagonal, px^2
EARLY_EXIT_TRANSMITTANCE = 1e-4
DEFAULT_BACKGROUND = (0.5, 0.5, 0.5)
DEFAULT_SIGMA_MIN = 1.0 / 255.0  # contributions below one 8-bit step are skipped
SIGMA_MAX = 0.999  # keeps 1 - sigma away from 0; the backward pass divides by it


def quaternion_to_rotation(quat: np.ndarray) -> np.ndarray:
    """Rotation matrix for a (w, x, y, z) quaternion; normalizes defensively."""
    q = np.asarray(quat, dtype=np.float64).reshape(4)
    q = q / np.linalg.norm(q)
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def covariance_from_params(quat: np.ndarray, log_scale: np.ndarray) -> np.ndarray:
    """3x3 world covariance R S S^T R^T from quaternion + per-axis log std-dev."""
    rot = quaternion_to_rotation(quat)
    m = rot * np.exp(np.asarray(log_scale, dtype=np.float64).reshape(3))[None, :]
    return m @ m.T


def ewa_project(
    mu: np.ndarray,
    cov3d: np.ndarray,
    pose: CameraPose,
    intr: Intrinsics,
    low_pass: float = LOW_PASS_PX2,
    color: np.ndarray | None = None,
    opacity: float = 1.0,
    source_index: int = -1,
) -> Splat2D | None:
    """Project one 3D Gaussian to the image plane; returns CULLED (None) when
    the center is at or behind the near plane or the footprint misses the image.

    The 2D covariance is (J W) cov3d (J W)^T restricted to the image axes,
    where W is the world-to-view rotation and J the pinhole Jacobian at mu,
    plus `low_pass` on the diagonal.
    """
    mat = pose.world_to_view()
    rot = mat[:3, :3]
    t = rot @ np.asarray(mu, dtype=np.float64).reshape(3) + mat[:3, 3]
    tx, ty, tz = t
    if tz <= intr.near:
        return CULLED

    fx, fy = intr.focal
    cx, cy = intr.principal_point
    jac = np.array(
        [
            [fx / tz, 0.0, -fx * tx / (tz * tz)],
            [0.0, fy / tz, -fy * ty / (tz * tz)],
        ]
    )
    u = jac @ rot
    cov2d = u @ np.asarray(cov3d, dtype=np.float64).reshape(3, 3) @ u.T
    cov2d[0, 0] += low_pass
    cov2d[1, 1] += low_pass

    mean2d = np.array([fx * tx / tz + cx, fy * ty / tz + cy])

    # 3-sigma footprint test; a splat whose ellipse cannot reach the image is culled
    half_x = 3.0 * np.sqrt(cov2d[0, 0])
    half_y = 3.0 * np.sqrt(cov2d[1, 1])
    if (
        mean2d[0] + half_x < 0.0
        or mean2d[0] - half_x > intr.width
        or mean2d[1] + half_y < 0.0
        or mean2d[1] - half_y > intr.height
    ):
        return CULLED

    return Splat2D(
        mean2d=mean2d,
        cov2d=cov2d,
        depth=float(tz),
        color=np.zeros(3) if color is None else color,
        opacity=float(opacity),
        source_index=source_index,
    )


def sigma_at(pixel: np.ndarray, splat: Splat2D) -> float:
    """Opacity-weighted Gaussian falloff at a pixel coordinate (Splat2D frame)."""
    d = np.asarray(pixel, dtype=np.float64).reshape(2) - splat.mean2d
    conic = np.linalg.inv(splat.cov2d)
    return float(splat.opacity * np.exp(-0.5 * d @ conic @ d))


def composite_pixel(
    splats_sorted_front_to_back: list[tuple[np.ndarray, float]],
    background: np.ndarray | tuple[float, float, float] = DEFAULT_BACKGROUND,
    early_exit: float = EARLY_EXIT_TRANSMITTANCE,
) -> tuple[np.ndarray, float]:
    """Front-to-back alpha compositing of (color, sigma) pairs at one pixel.

    Returns the composited color (background included through the residual
    transmittance) and the final transmittance. Compositing stops once the
    running transmittance drops below `early_exit`; pass 0 to disable.
    """
    color = np.zeros(3, dtype=np.float64)
    transmittance = 1.0
    for c, sigma in splats_sorted_front_to_back:
        if transmittance < early_exit:
            break
        color = color + np.asarray(c, dtype=np.float64) * (sigma * transmittance)
        transmittance = transmittance * (1.0 - sigma)
    color = color + transmittance * np.asarray(background, dtype=np.float64)
    return color, transmittance


def compositing_weights(sigmas: list[float]) -> tuple[np.ndarray, float]:
    """Per-splat weights sigma_i * prod_{j<i}(1 - sigma_j) and the final
    transmittance; these sum to exactly 1 in exact arithmetic."""
    weights = np.zeros(len(sigmas), dtype=np.float64)
    transmittance = 1.0
    for i, sigma in enumerate(sigmas):
        weights[i] = sigma * transmittance
        transmittance = transmittance * (1.0 - sigma)
    return weights, transmittance

"""Camera pose sampling and pinhole projection.

Conventions (fixed so fixtures are deterministic):
    - World frame is right-handed, +Y up.
    - Azimuth 0 deg points along +X and increases counter-clockwise when
      viewed from +Y; elevation is measured up from the XZ plane.
    - View space follows the computer-vision convention: +x right, +y down,
      +z forward, so depth is positive in front of the camera.
    - Pixel (ix, iy) covers the unit square with center (ix + 0.5, iy + 0.5).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

TEST_CAMERA_DISTANCE = 3.5
TEST_CAMERA_FOV_Y = 40.0
DEFAULT_RESOLUTION = 128


@dataclass(frozen=True)
class CameraPose:
    """Extrinsic pose given as eye / look-at / up vectors."""

    eye: tuple[float, float, float]
    look_at: tuple[float, float, float] = (0.0, 0.0, 0.0)
    up: tuple[float, float, float] = (0.0, 1.0, 0.0)

    def __post_init__(self) -> None:
        if np.allclose(self.eye, self.look_at):
            raise ValueError("eye must differ from look_at")

    def world_to_view(self) -> np.ndarray:
        """4x4 rigid world-to-view matrix (rotation orthonormal, det +1)."""
        eye = np.asarray(self.eye, dtype=np.float64)
        target = np.asarray(self.look_at, dtype=np.float64)
        up = np.asarray(self.up, dtype=np.float64)

        forward = target - eye
        forward = forward / np.linalg.norm(forward)
        right = np.cross(forward, up)
        norm = np.linalg.norm(right)
        if norm < 1e-12:
            raise ValueError("up vector is parallel to the viewing direction")
        right = right / norm
        true_up = np.cross(right, forward)

        rot = np.stack([right, -true_up, forward], axis=0)  # y points down in view space
        mat = np.eye(4, dtype=np.float64)
        mat[:3, :3] = rot
        mat[:3, 3] = -rot @ eye
        return mat


@dataclass(frozen=True)
class Intrinsics:
    """Pinhole parameters; fov_y in degrees, near/far in world units."""

    fov_y: float = TEST_CAMERA_FOV_Y
    width: int = DEFAULT_RESOLUTION
    height: int = DEFAULT_RESOLUTION
    near: float = 0.01
    far: float = 100.0

    def __post_init__(self) -> None:
        if not 0.0 < self.fov_y < 180.0:
            raise ValueError(f"fov_y must be in (0, 180), got {self.fov_y}")
        if self.near >= self.far:
            raise ValueError("near plane must be closer than far plane")
        if self.width < 1 or self.height < 1:
            raise ValueError("image must be at least 1x1")

    @property
    def focal(self) -> tuple[float, float]:
        """(fx, fy) in pixels; square pixels, so fx = fy derived from fov_y."""
        fy = self.height / (2.0 * math.tan(math.radians(self.fov_y) / 2.0))
        return fy, fy

    @property
    def principal_point(self) -> tuple[float, float]:
        return self.width / 2.0, self.height / 2.0


@dataclass(frozen=True)
class CameraRanges:
    """Uniform sampling ranges for training cameras; angles in degrees."""

    radius: tuple[float, float] = (0.8, 1.0)
    fov_y: tuple[float, float] = (15.0, 60.0)
    elevation: tuple[float, float] = (0.0, 30.0)
    azimuth: tuple[float, float] = (0.0, 360.0)

    def __post_init__(self) -> None:
        for name in ("radius", "fov_y", "elevation", "azimuth"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name} range has lo {lo} > hi {hi}")


def spherical_eye(radius: float, elevation_deg: float, azimuth_deg: float) -> np.ndarray:
    """Eye position on the sphere around the origin under the module conventions."""
    el = math.radians(elevation_deg)
    az = math.radians(azimuth_deg)
    return radius * np.array(
        [math.cos(el) * math.cos(az), math.sin(el), -math.cos(el) * math.sin(az)],
        dtype=np.float64,
    )


def sample_training_camera(
    rng: np.random.Generator,
    ranges: CameraRanges = CameraRanges(),
    width: int = DEFAULT_RESOLUTION,
    height: int = DEFAULT_RESOLUTION,
) -> tuple[CameraPose, Intrinsics]:
    """Draw one training camera; look-at is always the origin.

    Draw order is fixed (radius, fov, elevation, azimuth) so a seeded rng
    reproduces the committed fixture transcript.
    """
    radius = rng.uniform(*ranges.radius)
    fov_y = rng.uniform(*ranges.fov_y)
    elevation = rng.uniform(*ranges.elevation)
    azimuth = rng.uniform(*ranges.azimuth)
    pose = CameraPose(eye=tuple(spherical_eye(radius, elevation, azimuth)))
    return pose, Intrinsics(fov_y=fov_y, width=width, height=height)


def view_projection(pose: CameraPose, intr: Intrinsics) -> np.ndarray:
    """4x4 matrix taking world homogeneous points to clip space.

    After the perspective divide, x/y are NDC in [-1, 1] (x right, y down)
    and the look-at point lands at NDC (0, 0), i.e. the image center.
    """
    fx, fy = intr.focal
    cx, cy = intr.principal_point
    n, f = intr.near, intr.far
    proj = np.array(
        [
            [2.0 * fx / intr.width, 0.0, 2.0 * cx / intr.width - 1.0, 0.0],
            [0.0, 2.0 * fy / intr.height, 2.0 * cy / intr.height - 1.0, 0.0],
            [0.0, 0.0, (f + n) / (f - n), -2.0 * f * n / (f - n)],
            [0.0, 0.0, 1.0, 0.0],
        ],
        dtype=np.float64,
    )
    return proj @ pose.world_to_view()


def unproject_pixel(pose: CameraPose, intr: Intrinsics, px: float, py: float, depth: float) -> np.ndarray:
    """Analytic inverse of project_point for a given view-space depth."""
    fx, fy = intr.focal
    cx, cy = intr.principal_point
    view = np.array([(px - cx) * depth / fx, (py - cy) * depth / fy, depth], dtype=np.float64)
    mat = pose.world_to_view()
    return mat[:3, :3].T @ (view - mat[:3, 3])


def project_point(pose: CameraPose, intr: Intrinsics, point: np.ndarray) -> tuple[float, float, float]:
    """Project a world point; returns (pixel_x, pixel_y, view_depth)."""
    mat = pose.world_to_view()
    view = mat[:3, :3] @ np.asarray(point, dtype=np.float64) + mat[:3, 3]
    fx, fy = intr.focal
    cx, cy = intr.principal_point
    return fx * view[0] / view[2] + cx, fy * view[1] / view[2] + cy, view[2]


def turntable_poses(
    count: int,
    distance: float = TEST_CAMERA_DISTANCE,
    elevation_deg: float = 20.0,
    azimuth_offset_deg: float = 0.0,
) -> list[CameraPose]:
    """Evenly spaced orbit poses at fixed distance and elevation."""
    if count < 1:
        raise ValueError("turntable needs at least one view")
    poses = []
    for k in range(count):
        azimuth = azimuth_offset_deg + 360.0 * k / count
        poses.append(CameraPose(eye=tuple(spherical_eye(distance, elevation_deg, azimuth))))
    return poses

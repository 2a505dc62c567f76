"""Deterministic synthetic scenes and stored-view supervision for tests.

The standard fixture is a three-sphere composition in which the smallest
sphere's extent is at most one fifth of the largest's, so entity-level
machinery (zooming, masking, per-entity supervision) has something real to
earn. Target views are rendered from the ground truth: the composition set
shows the whole scene, each entity set shows that entity zoomed into the
canonical box, matching what entity-level optimization steps render.
"""

from __future__ import annotations

import math

import numpy as np

from .camera import CameraPose, Intrinsics, turntable_poses
from .guidance import COMPOSITION_PROMPT_ID, TargetView
from .initializer import EntityMesh, nearest_neighbor_distance
from .optimizer import zoom_in
from .rendering import DEFAULT_BACKGROUND, render
from .runtime import default_dtype
from .scene import (
    EntityMeta,
    GaussianSet,
    IDENTITY_QUATERNION,
    Scene,
    entity_indices,
    refresh_entity_bboxes,
)

GROUND_TRUTH_OPACITY = 0.97
TARGET_DISTANCE = 2.2
TARGET_ELEVATION_DEG = 20.0
TARGET_FOV_Y = 40.0
HELD_OUT_ELEVATION_DEG = 25.0

_SPHERES = {
    # id: (center, radius, point count, base RGB, prompt)
    # centers keep the entity bounding boxes disjoint, so entity-level and
    # composition-level supervision never contest the same border points
    1: ((-0.28, -0.10, 0.00), 0.32, 400, (0.85, 0.25, 0.20), "a large red sphere"),
    2: ((0.30, -0.06, 0.06), 0.18, 250, (0.20, 0.35, 0.85), "a medium blue sphere"),
    3: ((0.12, 0.38, -0.08), 0.058, 120, (0.95, 0.85, 0.25), "a small yellow sphere"),
}
COMPOSITION_PROMPT = "three colored spheres floating over a desk"


def fibonacci_sphere(count: int) -> np.ndarray:
    """Evenly distributed unit-sphere points (golden-angle spiral)."""
    k = np.arange(count, dtype=np.float64) + 0.5
    polar = np.arccos(1.0 - 2.0 * k / count)
    azimuth = math.pi * (1.0 + math.sqrt(5.0)) * k
    return np.stack(
        [
            np.sin(polar) * np.cos(azimuth),
            np.cos(polar),
            np.sin(polar) * np.sin(azimuth),
        ],
        axis=1,
    )


def sphere_mesh(
    entity_id: int,
    center: tuple[float, float, float],
    radius: float,
    count: int,
    base_color: tuple[float, float, float],
    prompt: str = "",
) -> EntityMesh:
    """Surface point cloud with deterministic color banding for texture."""
    unit = fibonacci_sphere(count)
    vertices = np.asarray(center, dtype=np.float64) + radius * unit
    bands = 0.12 * np.sin(4.0 * math.pi * unit[:, 1])[:, None]
    colors = np.clip(np.asarray(base_color, dtype=np.float64) + bands, 0.0, 1.0)
    return EntityMesh(vertices=vertices, vertex_colors=colors, entity_id=entity_id, prompt=prompt)


def ground_truth_meshes(include: tuple[int, ...] = (1, 2, 3)) -> list[EntityMesh]:
    meshes = []
    for eid in include:
        center, radius, count, color, prompt = _SPHERES[eid]
        meshes.append(sphere_mesh(eid, center, radius, count, color, prompt))
    return meshes


def ground_truth_scene(
    include: tuple[int, ...] = (1, 2, 3),
    opacity: float = GROUND_TRUTH_OPACITY,
    dtype=None,
) -> Scene:
    """Fully converged reference scene built straight from the sphere meshes."""
    dtype = np.dtype(dtype) if dtype is not None else default_dtype()
    slices = []
    metas = []
    for mesh in ground_truth_meshes(include):
        n = mesh.vertex_count
        nn = nearest_neighbor_distance(mesh.vertices)
        slices.append(
            GaussianSet(
                positions=mesh.vertices.astype(dtype),
                rotations=np.tile(np.asarray(IDENTITY_QUATERNION), (n, 1)).astype(dtype),
                log_scales=np.repeat(np.log(nn)[:, None], 3, axis=1).astype(dtype),
                opacities=np.full(n, opacity, dtype=dtype),
                colors=mesh.vertex_colors.astype(dtype),
                entity_tags=np.full(n, mesh.entity_id, dtype=np.int32),
            )
        )
        metas.append(EntityMeta(id=mesh.entity_id, prompt=mesh.prompt, bbox=mesh.bbox()))
    scene = Scene(
        gaussians=GaussianSet.concatenate(slices),
        entities=metas,
        composition_prompt=COMPOSITION_PROMPT,
    )
    refresh_entity_bboxes(scene)
    return scene


def _orbit_cameras(
    count: int,
    distance: float,
    elevation_deg: float,
    azimuth_offset_deg: float,
    fov_y: float,
    width: int,
    height: int,
) -> list[tuple[CameraPose, Intrinsics]]:
    intr = Intrinsics(fov_y=fov_y, width=width, height=height)
    poses = turntable_poses(count, distance, elevation_deg, azimuth_offset_deg)
    return [(pose, intr) for pose in poses]


def build_target_views(
    scene: Scene,
    views_per_set: int = 8,
    distance: float = TARGET_DISTANCE,
    elevation_deg: float = TARGET_ELEVATION_DEG,
    fov_y: float = TARGET_FOV_Y,
    width: int = 128,
    height: int = 128,
    background: tuple[float, float, float] = DEFAULT_BACKGROUND,
) -> dict[int, list[TargetView]]:
    """Stored supervision: prompt 0 sees the composition from one orbit ring,
    each entity set sees that entity zoomed into the canonical box from a
    two-ring orbit (elevations +/- the ring elevation), so entity supervision
    covers surface regions the composition ring never looks at."""
    cameras = _orbit_cameras(views_per_set, distance, elevation_deg, 0.0, fov_y, width, height)
    targets: dict[int, list[TargetView]] = {
        COMPOSITION_PROMPT_ID: [
            TargetView(pose, intr, render(scene, pose, intr, background=background).rgb)
            for pose, intr in cameras
        ]
    }
    upper = (views_per_set + 1) // 2
    entity_cameras = _orbit_cameras(upper, distance, elevation_deg, 0.0, fov_y, width, height)
    entity_cameras += _orbit_cameras(
        views_per_set - upper, distance, -elevation_deg, 180.0 / max(views_per_set - upper, 1),
        fov_y, width, height,
    )
    for meta in scene.entities:
        ent = scene.gaussians.take(entity_indices(scene, meta.id))
        zoomed, _ = zoom_in(ent, meta.bbox, scene.bbox_std, entity_id=meta.id)
        targets[meta.id] = [
            TargetView(pose, intr, render(zoomed, pose, intr, background=background).rgb)
            for pose, intr in entity_cameras
        ]
    return targets


def held_out_views(
    scene: Scene,
    count: int = 4,
    distance: float = TARGET_DISTANCE,
    elevation_deg: float = HELD_OUT_ELEVATION_DEG,
    azimuth_offset_deg: float = 22.5,
    fov_y: float = TARGET_FOV_Y,
    width: int = 128,
    height: int = 128,
    background: tuple[float, float, float] = DEFAULT_BACKGROUND,
) -> list[TargetView]:
    """Composition views disjoint from the training orbit (offset azimuth,
    different elevation)."""
    cameras = _orbit_cameras(count, distance, elevation_deg, azimuth_offset_deg, fov_y, width, height)
    return [
        TargetView(pose, intr, render(scene, pose, intr, background=background).rgb)
        for pose, intr in cameras
    ]


def jittered_init(
    scene: Scene,
    rng: np.random.Generator,
    position_frac: float = 0.1,
    randomize_colors: bool = True,
    opacity: float | None = None,
) -> Scene:
    """Recovery-test start state: per-entity position noise of
    position_frac * bbox extent per axis, optionally uniform random colors."""
    out = scene.copy()
    gs = out.gaussians
    dtype = gs.dtype
    for meta in out.entities:
        rows = entity_indices(out, meta.id)
        extent = meta.bbox.extent
        noise = rng.standard_normal((rows.size, 3)) * (position_frac * extent)
        gs.positions[rows] = (gs.positions[rows].astype(np.float64) + noise).astype(dtype)
    if randomize_colors:
        gs.colors[:] = rng.uniform(0.0, 1.0, size=gs.colors.shape).astype(dtype)
    if opacity is not None:
        gs.opacities[:] = dtype.type(opacity)
    refresh_entity_bboxes(out)
    return out


def psnr(image: np.ndarray, reference: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB for unit-range images."""
    mse = float(np.mean((np.asarray(image, np.float64) - np.asarray(reference, np.float64)) ** 2))
    if mse <= 0.0:
        return math.inf
    if math.isinf(mse):
        return -math.inf
    return 10.0 * math.log10(1.0 / mse)


def mean_view_psnr(
    scene_or_gaussians,
    views: list[TargetView],
    background: tuple[float, float, float] = DEFAULT_BACKGROUND,
) -> float:
    """Mean PSNR of fresh renders against each stored view."""
    values = []
    for view in views:
        img = render(scene_or_gaussians, view.pose, view.intrinsics, background=background)
        values.append(psnr(img.rgb, view.image))
    return float(np.mean(values))

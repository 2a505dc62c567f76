"""Scene construction: entity meshes to tagged Gaussians.

Each entity contributes Gaussians whose positions and colors come straight
from its mesh vertices; scales come from nearest-neighbor spacing so initial
footprints tile the surface; opacity starts low (0.1) so wrong geometry can
fade. A random-in-box variant backs the initialization ablation, and
add_entity implements the progressive-editing entry point.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, replace

import numpy as np
from scipy.spatial import cKDTree

from .runtime import default_dtype
from .scene import (
    Aabb3,
    DEFAULT_BBOX_STD,
    EntityMeta,
    GaussianSet,
    IDENTITY_QUATERNION,
    Scene,
    refresh_entity_bboxes,
    validate_scene,
)

DEFAULT_OPACITY = 0.1
FALLBACK_NN_DISTANCE = 0.01
RANDOM_INIT_SCALE_FRAC = 0.05  # log_scales = ln(frac * mean box extent)
OVERSAMPLE_JITTER_FRAC = 0.5  # of the local nearest-neighbor distance


class DuplicateEntityError(ValueError):
    """Entity id already present in the scene."""


@dataclass(frozen=True)
class EntityMesh:
    """Colored point geometry for one entity, in the shared world frame."""

    vertices: np.ndarray  # (M, 3) float64
    vertex_colors: np.ndarray  # (M, 3) float64 in [0, 1]
    entity_id: int
    prompt: str = ""

    def __post_init__(self):
        verts = np.ascontiguousarray(self.vertices, dtype=np.float64)
        colors = np.ascontiguousarray(self.vertex_colors, dtype=np.float64)
        if verts.ndim != 2 or verts.shape[1] != 3 or verts.shape[0] < 1:
            raise ValueError(f"vertices must be (M>=1, 3), got {verts.shape}")
        if colors.shape != verts.shape:
            raise ValueError(
                f"vertex_colors shape {colors.shape} does not match vertices {verts.shape}"
            )
        if not np.isfinite(verts).all():
            raise ValueError("vertices contain non-finite values")
        if colors.min(initial=0.0) < 0.0 or colors.max(initial=0.0) > 1.0:
            raise ValueError("vertex colors must lie in [0, 1]")
        object.__setattr__(self, "vertices", verts)
        object.__setattr__(self, "vertex_colors", colors)

    @property
    def vertex_count(self) -> int:
        return self.vertices.shape[0]

    def bbox(self) -> Aabb3:
        return Aabb3.from_points(self.vertices)


def nearest_neighbor_distance(points: np.ndarray, scalar: bool = False) -> np.ndarray:
    """Per-point distance to the nearest other point.

    With scalar=True every entry is the global minimum pair distance. Fewer
    than two points cannot define a spacing; a constant fallback is returned
    with a warning.
    """
    pts = np.ascontiguousarray(points, dtype=np.float64)
    m = pts.shape[0]
    if m < 2:
        warnings.warn(
            f"nearest-neighbor distance undefined for {m} point(s); "
            f"using fallback {FALLBACK_NN_DISTANCE}",
            stacklevel=2,
        )
        return np.full(m, FALLBACK_NN_DISTANCE)
    dist, _ = cKDTree(pts).query(pts, k=2)
    nn = dist[:, 1]
    if scalar:
        return np.full(m, nn.min())
    return nn


def init_entity_from_mesh(
    mesh: EntityMesh,
    n: int,
    rng: np.random.Generator,
    scalar_nn: bool = False,
    dtype=None,
) -> GaussianSet:
    """N Gaussians from mesh vertices.

    n <= vertex count draws vertices uniformly without replacement; larger n
    draws with replacement and jitters each point by half its local
    nearest-neighbor distance so duplicates spread out.
    """
    if n < 1:
        raise ValueError(f"need at least one Gaussian, got n={n}")
    dtype = np.dtype(dtype) if dtype is not None else default_dtype()
    m = mesh.vertex_count
    nn = nearest_neighbor_distance(mesh.vertices, scalar=scalar_nn)

    if n <= m:
        chosen = rng.choice(m, size=n, replace=False)
        positions = mesh.vertices[chosen]
    else:
        chosen = rng.integers(0, m, size=n)
        jitter = rng.standard_normal((n, 3)) * (OVERSAMPLE_JITTER_FRAC * nn[chosen])[:, None]
        positions = mesh.vertices[chosen] + jitter

    rotations = np.tile(np.asarray(IDENTITY_QUATERNION, dtype=np.float64), (n, 1))
    return GaussianSet(
        positions=positions.astype(dtype),
        rotations=rotations.astype(dtype),
        log_scales=np.repeat(np.log(nn[chosen])[:, None], 3, axis=1).astype(dtype),
        opacities=np.full(n, DEFAULT_OPACITY, dtype=dtype),
        colors=mesh.vertex_colors[chosen].astype(dtype),
        entity_tags=np.full(n, mesh.entity_id, dtype=np.int32),
    )


def random_init_in_bbox(
    bbox: Aabb3,
    n: int,
    rng: np.random.Generator,
    entity_id: int = 1,
    dtype=None,
) -> GaussianSet:
    """Structure-free initialization: uniform positions and colors in a box."""
    if n < 1:
        raise ValueError(f"need at least one Gaussian, got n={n}")
    extent = bbox.extent
    if np.any(extent <= 0):
        raise ValueError(f"bounding box has a zero-extent axis: extent {extent}")
    dtype = np.dtype(dtype) if dtype is not None else default_dtype()
    positions = rng.uniform(bbox.min, bbox.max, size=(n, 3))
    rotations = np.tile(np.asarray(IDENTITY_QUATERNION, dtype=np.float64), (n, 1))
    return GaussianSet(
        positions=positions.astype(dtype),
        rotations=rotations.astype(dtype),
        log_scales=np.full((n, 3), np.log(RANDOM_INIT_SCALE_FRAC * float(extent.mean())), dtype=dtype),
        opacities=np.full(n, DEFAULT_OPACITY, dtype=dtype),
        colors=rng.uniform(0.0, 1.0, size=(n, 3)).astype(dtype),
        entity_tags=np.full(n, entity_id, dtype=np.int32),
    )


def allocate_points(total: int, weights: list[int]) -> list[int]:
    """Split a point count proportionally to weights, each share >= 1.

    Largest-remainder rounding keeps the sum exactly `total`.
    """
    if total < len(weights):
        raise ValueError(f"cannot split {total} points across {len(weights)} entities")
    wsum = float(sum(weights))
    raw = [total * w / wsum for w in weights]
    counts = [max(int(r), 1) for r in raw]
    remainders = sorted(
        range(len(weights)), key=lambda j: (raw[j] - int(raw[j]), j), reverse=True
    )
    k = 0
    while sum(counts) < total:
        counts[remainders[k % len(weights)]] += 1
        k += 1
    k = 0
    while sum(counts) > total:
        j = remainders[::-1][k % len(weights)]
        if counts[j] > 1:
            counts[j] -= 1
        k += 1
    return counts


def init_scene(
    meshes: list[EntityMesh],
    composition_prompt: str,
    total_points: int,
    rng: np.random.Generator,
    bbox_std: Aabb3 | None = None,
    bbox_overrides: dict[int, Aabb3] | None = None,
    random_init: bool = False,
    scalar_nn: bool = False,
    dtype=None,
) -> Scene:
    """Build the full tagged scene, one slice per entity mesh.

    Points are allocated proportionally to vertex counts. With random_init,
    positions come from each entity's bounding box (override, else the mesh
    extent) instead of the mesh itself.
    """
    if not meshes:
        raise ValueError("need at least one entity mesh")
    ids = [m.entity_id for m in meshes]
    if len(set(ids)) != len(ids):
        raise DuplicateEntityError(f"duplicate entity ids in mesh list: {ids}")
    overrides = bbox_overrides or {}

    counts = allocate_points(total_points, [m.vertex_count for m in meshes])
    slices = []
    metas = []
    for mesh, n in zip(meshes, counts):
        if random_init:
            box = overrides.get(mesh.entity_id, mesh.bbox())
            slices.append(random_init_in_bbox(box, n, rng, entity_id=mesh.entity_id, dtype=dtype))
        else:
            slices.append(init_entity_from_mesh(mesh, n, rng, scalar_nn=scalar_nn, dtype=dtype))
        metas.append(EntityMeta(id=mesh.entity_id, prompt=mesh.prompt, bbox=mesh.bbox()))

    scene = Scene(
        gaussians=GaussianSet.concatenate(slices),
        entities=metas,
        composition_prompt=composition_prompt,
        bbox_std=bbox_std if bbox_std is not None else Aabb3(*DEFAULT_BBOX_STD),
    )
    refresh_entity_bboxes(scene)
    problems = validate_scene(scene)
    if problems:
        raise ValueError("initialized scene failed validation: " + "; ".join(problems))
    return scene


def add_entity(
    scene: Scene,
    mesh: EntityMesh,
    freeze_existing: bool = False,
    n: int | None = None,
    rng: np.random.Generator | None = None,
    scalar_nn: bool = False,
) -> Scene:
    """Progressive edit: append a new entity without touching existing rows.

    Returns a new Scene; the input is left as-is. With freeze_existing, every
    prior entity is marked frozen so later optimization cannot update it.
    """
    if any(meta.id == mesh.entity_id for meta in scene.entities):
        raise DuplicateEntityError(f"entity id {mesh.entity_id} already present")
    if rng is None:
        rng = np.random.default_rng(0)
    count = mesh.vertex_count if n is None else n
    fresh = init_entity_from_mesh(
        mesh, count, rng, scalar_nn=scalar_nn, dtype=scene.gaussians.dtype
    )

    out = scene.copy()
    out.gaussians = GaussianSet.concatenate([out.gaussians, fresh])
    if freeze_existing:
        out.entities = [replace(meta, frozen=True) for meta in out.entities]
    out.entities.append(EntityMeta(id=mesh.entity_id, prompt=mesh.prompt, bbox=mesh.bbox()))
    refresh_entity_bboxes(out)
    return out

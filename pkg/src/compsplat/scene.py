"""Entity-tagged Gaussian scene model.

A scene couples a flat structure-of-arrays Gaussian container with
per-entity metadata (prompt, bounding box, frozen flag). Entity membership
is a per-Gaussian integer tag so identity survives position drift during
optimization; bounding boxes are derived from the tagged positions on
demand rather than trusted to stay current.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from compsplat.runtime import default_dtype

QUAT_NORM_TOL = 1e-6
IDENTITY_QUATERNION = (1.0, 0.0, 0.0, 0.0)  # (w, x, y, z)


class UnknownEntityError(KeyError):
    """Raised when an entity id is not present in the scene."""


class EmptyEntityError(ValueError):
    """Raised when an operation needs an entity that owns zero Gaussians."""


@dataclass
class Aabb3:
    """Axis-aligned box in world units, stored as componentwise min/max corners."""

    min: np.ndarray
    max: np.ndarray

    def __post_init__(self) -> None:
        self.min = np.asarray(self.min, dtype=np.float64).reshape(3)
        self.max = np.asarray(self.max, dtype=np.float64).reshape(3)
        if not np.all(self.min <= self.max):
            raise ValueError(f"box min {self.min} exceeds max {self.max}")

    @property
    def extent(self) -> np.ndarray:
        return self.max - self.min

    @property
    def center(self) -> np.ndarray:
        return (self.min + self.max) / 2.0

    def contains(self, points: np.ndarray) -> np.ndarray:
        """Boolean mask of points inside or on the box boundary."""
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        return np.all((pts >= self.min) & (pts <= self.max), axis=1)

    def union(self, other: "Aabb3") -> "Aabb3":
        return Aabb3(np.minimum(self.min, other.min), np.maximum(self.max, other.max))

    @classmethod
    def from_points(cls, points: np.ndarray) -> "Aabb3":
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        if pts.shape[0] == 0:
            raise ValueError("cannot build a box from zero points")
        return cls(pts.min(axis=0), pts.max(axis=0))


DEFAULT_BBOX_STD = ((-0.5, -0.5, -0.5), (0.5, 0.5, 0.5))


@dataclass
class EntityMeta:
    """Per-entity id, prompt text, bounding box, and progressive-editing freeze flag."""

    id: int
    prompt: str
    bbox: Aabb3
    frozen: bool = False


@dataclass
class GaussianSet:
    """Structure-of-arrays container for N anisotropic Gaussians.

    Fields:
        positions:   (N, 3) centers, world units.
        rotations:   (N, 4) unit quaternions (w, x, y, z), rotational part of
                     the covariance factorization R S S^T R^T.
        log_scales:  (N, 3) log of per-axis standard deviations, world units.
        opacities:   (N,) in [0, 1].
        colors:      (N, 3) RGB in [0, 1].
        entity_tags: (N,) int32 entity membership, values in {1..L}.
    """

    positions: np.ndarray
    rotations: np.ndarray
    log_scales: np.ndarray
    opacities: np.ndarray
    colors: np.ndarray
    entity_tags: np.ndarray

    def __post_init__(self) -> None:
        self.entity_tags = np.asarray(self.entity_tags, dtype=np.int32).reshape(-1)
        n = self.entity_tags.shape[0]
        dtype = np.asarray(self.positions).dtype
        if dtype not in (np.float32, np.float64):
            dtype = default_dtype()
        self.positions = np.ascontiguousarray(self.positions, dtype=dtype).reshape(n, 3)
        self.rotations = np.ascontiguousarray(self.rotations, dtype=dtype).reshape(n, 4)
        self.log_scales = np.ascontiguousarray(self.log_scales, dtype=dtype).reshape(n, 3)
        self.opacities = np.ascontiguousarray(self.opacities, dtype=dtype).reshape(n)
        self.colors = np.ascontiguousarray(self.colors, dtype=dtype).reshape(n, 3)

    @property
    def count(self) -> int:
        return self.positions.shape[0]

    @property
    def dtype(self) -> np.dtype:
        return self.positions.dtype

    @classmethod
    def empty(cls, dtype: np.dtype | None = None) -> "GaussianSet":
        dt = dtype or default_dtype()
        return cls(
            positions=np.zeros((0, 3), dtype=dt),
            rotations=np.zeros((0, 4), dtype=dt),
            log_scales=np.zeros((0, 3), dtype=dt),
            opacities=np.zeros(0, dtype=dt),
            colors=np.zeros((0, 3), dtype=dt),
            entity_tags=np.zeros(0, dtype=np.int32),
        )

    def copy(self) -> "GaussianSet":
        return GaussianSet(
            positions=self.positions.copy(),
            rotations=self.rotations.copy(),
            log_scales=self.log_scales.copy(),
            opacities=self.opacities.copy(),
            colors=self.colors.copy(),
            entity_tags=self.entity_tags.copy(),
        )

    def astype(self, dtype: np.dtype) -> "GaussianSet":
        return GaussianSet(
            positions=self.positions.astype(dtype),
            rotations=self.rotations.astype(dtype),
            log_scales=self.log_scales.astype(dtype),
            opacities=self.opacities.astype(dtype),
            colors=self.colors.astype(dtype),
            entity_tags=self.entity_tags.copy(),
        )

    def take(self, indices: np.ndarray) -> "GaussianSet":
        """Order-stable subset copy; `indices` may be an int array or bool mask."""
        idx = np.asarray(indices)
        return GaussianSet(
            positions=self.positions[idx],
            rotations=self.rotations[idx],
            log_scales=self.log_scales[idx],
            opacities=self.opacities[idx],
            colors=self.colors[idx],
            entity_tags=self.entity_tags[idx],
        )

    def write_rows(self, indices: np.ndarray, other: "GaussianSet") -> None:
        """Overwrite the selected rows in place with `other`'s rows (same order)."""
        self.positions[indices] = other.positions
        self.rotations[indices] = other.rotations
        self.log_scales[indices] = other.log_scales
        self.opacities[indices] = other.opacities
        self.colors[indices] = other.colors
        self.entity_tags[indices] = other.entity_tags

    @staticmethod
    def concatenate(parts: list["GaussianSet"]) -> "GaussianSet":
        if not parts:
            return GaussianSet.empty()
        return GaussianSet(
            positions=np.concatenate([p.positions for p in parts], axis=0),
            rotations=np.concatenate([p.rotations for p in parts], axis=0),
            log_scales=np.concatenate([p.log_scales for p in parts], axis=0),
            opacities=np.concatenate([p.opacities for p in parts], axis=0),
            colors=np.concatenate([p.colors for p in parts], axis=0),
            entity_tags=np.concatenate([p.entity_tags for p in parts], axis=0),
        )


@dataclass
class Scene:
    """Composed Gaussians plus entity metadata and the composition prompt."""

    gaussians: GaussianSet
    entities: list[EntityMeta] = field(default_factory=list)
    composition_prompt: str = ""
    bbox_std: Aabb3 = field(default_factory=lambda: Aabb3(*DEFAULT_BBOX_STD))

    def entity(self, entity_id: int) -> EntityMeta:
        for meta in self.entities:
            if meta.id == entity_id:
                return meta
        raise UnknownEntityError(f"entity id {entity_id} not in scene")

    @property
    def entity_ids(self) -> list[int]:
        return [meta.id for meta in self.entities]

    def copy(self) -> "Scene":
        return Scene(
            gaussians=self.gaussians.copy(),
            entities=[EntityMeta(m.id, m.prompt, Aabb3(m.bbox.min.copy(), m.bbox.max.copy()), m.frozen) for m in self.entities],
            composition_prompt=self.composition_prompt,
            bbox_std=Aabb3(self.bbox_std.min.copy(), self.bbox_std.max.copy()),
        )


def entity_indices(scene: Scene, entity_id: int) -> np.ndarray:
    """Indices of the Gaussians tagged with `entity_id`, in storage order."""
    scene.entity(entity_id)  # raises UnknownEntityError when absent
    return np.flatnonzero(scene.gaussians.entity_tags == entity_id)


def entity_slice(scene: Scene, entity_id: int) -> GaussianSet:
    """Order-stable copy of exactly the Gaussians tagged with `entity_id`."""
    return scene.gaussians.take(entity_indices(scene, entity_id))


def frozen_row_mask(scene: Scene) -> np.ndarray:
    """Boolean mask over Gaussians belonging to frozen entities."""
    mask = np.zeros(scene.gaussians.count, dtype=bool)
    for meta in scene.entities:
        if meta.frozen:
            mask |= scene.gaussians.entity_tags == meta.id
    return mask


def compute_entity_bbox(scene: Scene, entity_id: int) -> Aabb3:
    """Componentwise min/max box over the entity's Gaussian centers.

    The result is also stored back into the entity's metadata so downstream
    consumers (zooming, masking) see a box consistent with current positions.
    """
    meta = scene.entity(entity_id)
    idx = np.flatnonzero(scene.gaussians.entity_tags == entity_id)
    if idx.size == 0:
        raise EmptyEntityError(f"entity id {entity_id} owns zero Gaussians")
    pts = scene.gaussians.positions[idx].astype(np.float64)
    box = Aabb3(pts.min(axis=0), pts.max(axis=0))
    meta.bbox = box
    return box


def refresh_entity_bboxes(scene: Scene) -> None:
    """Recompute every entity's bbox from its currently tagged Gaussians."""
    for meta in scene.entities:
        compute_entity_bbox(scene, meta.id)


def validate_scene(scene: Scene) -> list[str]:
    """Check all type invariants; return violations (empty list means valid).

    Each violation names the offending index and field. This reports rather
    than throws so callers can surface every problem at once.
    """
    g = scene.gaussians
    violations: list[str] = []

    if len(scene.entities) < 1:
        violations.append("entities: scene must declare at least one entity")
    ids = [meta.id for meta in scene.entities]
    for i, meta in enumerate(scene.entities):
        if ids.count(meta.id) > 1:
            violations.append(f"entities[{i}].id: duplicate entity id {meta.id}")
        if not np.all(meta.bbox.min <= meta.bbox.max):
            violations.append(f"entities[{i}].bbox: min exceeds max")

    norms = np.linalg.norm(g.rotations.astype(np.float64), axis=1)
    for i in np.flatnonzero(np.abs(norms - 1.0) > QUAT_NORM_TOL):
        violations.append(f"rotations[{i}]: norm {norms[i]:.8f} deviates from 1 by more than {QUAT_NORM_TOL}")

    for i in np.flatnonzero((g.opacities < 0) | (g.opacities > 1)):
        violations.append(f"opacities[{i}]: value {g.opacities[i]} outside [0, 1]")

    bad_color = np.any((g.colors < 0) | (g.colors > 1), axis=1)
    for i in np.flatnonzero(bad_color):
        violations.append(f"colors[{i}]: value {g.colors[i]} outside [0, 1]^3")

    known = set(ids)
    for i in np.flatnonzero(~np.isin(g.entity_tags, list(known) or [0])):
        violations.append(f"entity_tags[{i}]: tag {g.entity_tags[i]} references no entity")

    for name in ("positions", "rotations", "log_scales", "opacities", "colors"):
        arr = getattr(g, name)
        if not np.all(np.isfinite(arr)):
            i = int(np.flatnonzero(~np.isfinite(arr).reshape(arr.shape[0], -1).all(axis=1))[0])
            violations.append(f"{name}[{i}]: non-finite value")

    return violations


def normalized_quaternions(quats: np.ndarray) -> np.ndarray:
    """Rows scaled to unit norm; zero-norm rows are replaced by the identity."""
    q = np.asarray(quats)
    norms = np.linalg.norm(q, axis=-1, keepdims=True)
    out = np.where(norms > 0, q / np.where(norms == 0, 1.0, norms), 0.0)
    zero = (norms.reshape(-1) == 0)
    if np.any(zero):
        out = out.copy()
        out[zero] = np.array(IDENTITY_QUATERNION, dtype=q.dtype)
    return out.astype(q.dtype)

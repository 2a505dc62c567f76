"""Shared builders for compact, valid test scenes."""

import numpy as np
import pytest

from compsplat.camera import CameraPose, Intrinsics
from compsplat.scene import Aabb3, EntityMeta, GaussianSet, Scene
from compsplat.scene import refresh_entity_bboxes


def random_gaussians(
    rng: np.random.Generator,
    count: int,
    n_entities: int = 1,
    dtype=np.float32,
    spread: float = 0.35,
    scale_range: tuple[float, float] = (0.02, 0.12),
) -> GaussianSet:
    """Valid Gaussians clustered near the origin with bounded scales."""
    quats = rng.normal(size=(count, 4))
    quats /= np.linalg.norm(quats, axis=1, keepdims=True)
    tags = 1 + (np.arange(count) % n_entities)
    return GaussianSet(
        positions=rng.uniform(-spread, spread, size=(count, 3)).astype(dtype),
        rotations=quats.astype(dtype),
        log_scales=np.log(rng.uniform(*scale_range, size=(count, 3))).astype(dtype),
        opacities=rng.uniform(0.2, 0.95, size=count).astype(dtype),
        colors=rng.uniform(0.0, 1.0, size=(count, 3)).astype(dtype),
        entity_tags=tags.astype(np.int32),
    )


def random_scene(
    rng: np.random.Generator,
    count: int = 24,
    n_entities: int = 2,
    dtype=np.float32,
    **kwargs,
) -> Scene:
    gaussians = random_gaussians(rng, count, n_entities, dtype=dtype, **kwargs)
    entities = [
        EntityMeta(id=i, prompt=f"entity {i}", bbox=Aabb3((0, 0, 0), (0, 0, 0)))
        for i in range(1, n_entities + 1)
    ]
    scene = Scene(gaussians=gaussians, entities=entities, composition_prompt="a test scene")
    refresh_entity_bboxes(scene)
    return scene


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture
def small_scene(rng) -> Scene:
    return random_scene(rng, count=24, n_entities=2)


@pytest.fixture
def test_camera() -> tuple[CameraPose, Intrinsics]:
    pose = CameraPose(eye=(0.9, 0.6, 1.8))
    intr = Intrinsics(fov_y=45.0, width=48, height=40)
    return pose, intr

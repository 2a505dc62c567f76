import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from compsplat.scene import (
    Aabb3,
    EmptyEntityError,
    EntityMeta,
    GaussianSet,
    IDENTITY_QUATERNION,
    UnknownEntityError,
    compute_entity_bbox,
    entity_indices,
    entity_slice,
    frozen_row_mask,
    normalized_quaternions,
    refresh_entity_bboxes,
    validate_scene,
)
from conftest import random_gaussians, random_scene


class TestAabb3:
    def test_extent_and_center(self):
        box = Aabb3((-1.0, 0.0, 2.0), (3.0, 1.0, 2.5))
        np.testing.assert_allclose(box.extent, [4.0, 1.0, 0.5])
        np.testing.assert_allclose(box.center, [1.0, 0.5, 2.25])

    def test_min_above_max_rejected(self):
        with pytest.raises(ValueError):
            Aabb3((0.0, 0.0, 1.0), (1.0, 1.0, 0.5))

    def test_contains_includes_boundary(self):
        box = Aabb3((0.0, 0.0, 0.0), (1.0, 1.0, 1.0))
        points = [(0.0, 0.0, 0.0), (1.0, 1.0, 1.0), (0.5, 0.5, 0.5), (1.0001, 0.5, 0.5)]
        np.testing.assert_array_equal(box.contains(points), [True, True, True, False])

    def test_union_covers_both(self):
        a = Aabb3((0, 0, 0), (1, 1, 1))
        b = Aabb3((-2, 0.5, 0.5), (0.5, 3, 0.7))
        u = a.union(b)
        np.testing.assert_allclose(u.min, [-2, 0, 0])
        np.testing.assert_allclose(u.max, [1, 3, 1])

    def test_from_points_is_tight(self):
        pts = np.array([[0.5, -1.0, 2.0], [-0.5, 4.0, 1.0], [0.0, 0.0, 1.5]])
        box = Aabb3.from_points(pts)
        np.testing.assert_allclose(box.min, [-0.5, -1.0, 1.0])
        np.testing.assert_allclose(box.max, [0.5, 4.0, 2.0])

    def test_from_points_rejects_empty(self):
        with pytest.raises(ValueError):
            Aabb3.from_points(np.zeros((0, 3)))

    @given(
        hnp.arrays(
            np.float64,
            st.tuples(st.integers(1, 20), st.just(3)),
            elements=st.floats(-1e6, 1e6),
        )
    )
    def test_from_points_contains_every_point(self, pts):
        box = Aabb3.from_points(pts)
        assert bool(np.all(box.contains(pts)))


class TestGaussianSet:
    def test_arrays_are_reshaped_and_cast(self, rng):
        g = GaussianSet(
            positions=np.zeros(6, dtype=np.float32),
            rotations=[1, 0, 0, 0, 1, 0, 0, 0],
            log_scales=np.zeros((2, 3), dtype=np.float32),
            opacities=[0.5, 0.5],
            colors=np.zeros((2, 3), dtype=np.float32),
            entity_tags=[1, 1],
        )
        assert g.count == 2
        assert g.positions.shape == (2, 3)
        assert g.rotations.shape == (2, 4)
        assert g.entity_tags.dtype == np.int32

    def test_empty_has_zero_rows(self):
        g = GaussianSet.empty(np.float64)
        assert g.count == 0
        assert g.dtype == np.float64

    def test_copy_is_independent(self, rng):
        g = random_gaussians(rng, 5)
        h = g.copy()
        h.positions[0] = 99.0
        assert g.positions[0, 0] != 99.0

    def test_astype_round_trip_dtype(self, rng):
        g = random_gaussians(rng, 5, dtype=np.float32)
        h = g.astype(np.float64)
        assert h.dtype == np.float64
        assert h.entity_tags.dtype == np.int32
        np.testing.assert_allclose(h.positions, g.positions)

    def test_take_with_indices_and_mask(self, rng):
        g = random_gaussians(rng, 6)
        byidx = g.take(np.array([4, 1]))
        np.testing.assert_array_equal(byidx.positions, g.positions[[4, 1]])
        mask = np.zeros(6, dtype=bool)
        mask[[1, 4]] = True
        bymask = g.take(mask)
        np.testing.assert_array_equal(bymask.positions, g.positions[[1, 4]])

    def test_write_rows_round_trip(self, rng):
        g = random_gaussians(rng, 6)
        idx = np.array([5, 0, 3])
        sub = g.take(idx)
        sub.positions += 0.25
        g.write_rows(idx, sub)
        np.testing.assert_array_equal(g.positions[idx], sub.positions)

    def test_concatenate_preserves_order(self, rng):
        a = random_gaussians(rng, 3)
        b = random_gaussians(rng, 2)
        c = GaussianSet.concatenate([a, b])
        assert c.count == 5
        np.testing.assert_array_equal(c.positions[:3], a.positions)
        np.testing.assert_array_equal(c.positions[3:], b.positions)

    def test_concatenate_empty_list(self):
        assert GaussianSet.concatenate([]).count == 0


class TestScene:
    def test_entity_lookup(self, small_scene):
        assert small_scene.entity(2).id == 2
        with pytest.raises(UnknownEntityError):
            small_scene.entity(99)

    def test_entity_ids_in_declaration_order(self, small_scene):
        assert small_scene.entity_ids == [1, 2]

    def test_copy_is_deep(self, small_scene):
        dup = small_scene.copy()
        dup.gaussians.positions[0] = 42.0
        dup.entities[0].bbox.min[0] = -42.0
        dup.entities[0].frozen = True
        assert small_scene.gaussians.positions[0, 0] != 42.0
        assert small_scene.entities[0].bbox.min[0] != -42.0
        assert not small_scene.entities[0].frozen


class TestEntityViews:
    def test_entity_indices_in_storage_order(self, small_scene):
        idx = entity_indices(small_scene, 1)
        np.testing.assert_array_equal(
            idx, np.flatnonzero(small_scene.gaussians.entity_tags == 1)
        )
        assert np.all(np.diff(idx) > 0)

    def test_entity_indices_unknown_id(self, small_scene):
        with pytest.raises(UnknownEntityError):
            entity_indices(small_scene, 7)

    def test_entity_slice_matches_take(self, small_scene):
        sl = entity_slice(small_scene, 2)
        assert np.all(sl.entity_tags == 2)
        assert sl.count == int(np.sum(small_scene.gaussians.entity_tags == 2))

    def test_frozen_row_mask(self, small_scene):
        assert not frozen_row_mask(small_scene).any()
        small_scene.entity(1).frozen = True
        mask = frozen_row_mask(small_scene)
        np.testing.assert_array_equal(mask, small_scene.gaussians.entity_tags == 1)

    def test_compute_entity_bbox_writes_back(self, small_scene):
        small_scene.entities[0].bbox = Aabb3((0, 0, 0), (0, 0, 0))
        box = compute_entity_bbox(small_scene, 1)
        pts = small_scene.gaussians.positions[small_scene.gaussians.entity_tags == 1]
        np.testing.assert_allclose(box.min, pts.min(axis=0).astype(np.float64))
        assert small_scene.entity(1).bbox is box

    def test_compute_entity_bbox_empty_entity(self, small_scene):
        small_scene.entities.append(
            EntityMeta(id=9, prompt="ghost", bbox=Aabb3((0, 0, 0), (0, 0, 0)))
        )
        with pytest.raises(EmptyEntityError):
            compute_entity_bbox(small_scene, 9)

    def test_refresh_updates_all(self, rng):
        scene = random_scene(rng, count=12, n_entities=3)
        scene.gaussians.positions += 0.5
        refresh_entity_bboxes(scene)
        for meta in scene.entities:
            pts = scene.gaussians.positions[scene.gaussians.entity_tags == meta.id]
            np.testing.assert_allclose(meta.bbox.max, pts.max(axis=0).astype(np.float64))


class TestValidateScene:
    def test_valid_scene_has_no_violations(self, small_scene):
        assert validate_scene(small_scene) == []

    def test_duplicate_entity_id(self, small_scene):
        small_scene.entities.append(
            EntityMeta(id=1, prompt="again", bbox=Aabb3((0, 0, 0), (1, 1, 1)))
        )
        assert any("duplicate" in v for v in validate_scene(small_scene))

    def test_denormalized_quaternion(self, small_scene):
        small_scene.gaussians.rotations[3] = (2.0, 0.0, 0.0, 0.0)
        violations = validate_scene(small_scene)
        assert any(v.startswith("rotations[3]") for v in violations)

    def test_opacity_out_of_range(self, small_scene):
        small_scene.gaussians.opacities[1] = 1.5
        assert any(v.startswith("opacities[1]") for v in validate_scene(small_scene))

    def test_color_out_of_range(self, small_scene):
        small_scene.gaussians.colors[2, 1] = -0.1
        assert any(v.startswith("colors[2]") for v in validate_scene(small_scene))

    def test_orphan_entity_tag(self, small_scene):
        small_scene.gaussians.entity_tags[0] = 55
        assert any(v.startswith("entity_tags[0]") for v in validate_scene(small_scene))

    def test_non_finite_field(self, small_scene):
        small_scene.gaussians.log_scales[4, 2] = np.nan
        assert any(v.startswith("log_scales[4]") for v in validate_scene(small_scene))

    def test_scene_without_entities(self, small_scene):
        small_scene.entities.clear()
        violations = validate_scene(small_scene)
        assert any("at least one entity" in v for v in violations)


class TestNormalizedQuaternions:
    def test_unit_rows_survive(self):
        q = np.array([[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0]])
        np.testing.assert_allclose(normalized_quaternions(q), q)

    def test_zero_row_becomes_identity(self):
        q = np.array([[0.0, 0.0, 0.0, 0.0], [0.0, 2.0, 0.0, 0.0]])
        out = normalized_quaternions(q)
        np.testing.assert_allclose(out[0], IDENTITY_QUATERNION)
        np.testing.assert_allclose(out[1], [0.0, 1.0, 0.0, 0.0])

    def test_dtype_preserved(self):
        q = np.ones((2, 4), dtype=np.float32)
        assert normalized_quaternions(q).dtype == np.float32

    @settings(max_examples=50)
    @given(
        hnp.arrays(
            np.float64,
            st.tuples(st.integers(1, 8), st.just(4)),
            elements=st.floats(-100, 100),
        )
    )
    def test_rows_come_out_unit_norm(self, q):
        norms = np.linalg.norm(normalized_quaternions(q), axis=1)
        np.testing.assert_allclose(norms, 1.0, atol=1e-12)

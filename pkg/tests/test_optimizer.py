import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from compsplat.camera import Intrinsics, turntable_poses
from compsplat.guidance import PhotometricProvider, ProviderSet, TargetView
from compsplat.optimizer import (
    DegenerateEntityError,
    GradAccumulator,
    LrSchedule,
    NonFiniteGradientError,
    OptimConfig,
    OptimizationAborted,
    OptimReport,
    ReportRow,
    apply_update,
    densify_and_prune,
    mask_frozen,
    mask_gradients,
    run_dynamic_optimization,
    select_level,
    zoom_back,
    zoom_in,
)
from compsplat.rendering import GradientBuffer, render
from compsplat.scene import Aabb3, UnknownEntityError, entity_indices
from conftest import random_gaussians, random_scene


class TestLrSchedule:
    def test_constant_when_no_endpoint(self):
        lr = LrSchedule(0.05)
        assert lr.value(0, 2000) == 0.05
        assert lr.value(1999, 2000) == 0.05

    def test_linear_endpoints(self):
        lr = LrSchedule(1e-3, 1e-5)
        assert lr.value(0, 2000) == pytest.approx(1e-3)
        assert lr.value(1999, 2000) == pytest.approx(1e-5)
        assert lr.value(999, 2000) == pytest.approx((1e-3 + 1e-5) / 2, rel=2e-3)

    def test_single_iteration_uses_start(self):
        assert LrSchedule(1e-2, 1e-3).value(0, 1) == 1e-2

    def test_nonpositive_rates_rejected(self):
        with pytest.raises(ValueError):
            LrSchedule(0.0)
        with pytest.raises(ValueError):
            LrSchedule(1e-3, -1e-5)


class TestOptimConfig:
    def test_default_schedules(self):
        cfg = OptimConfig()
        assert (cfg.lr_position.start, cfg.lr_position.end) == (1e-3, 1e-5)
        assert (cfg.lr_scale.start, cfg.lr_scale.end) == (1e-2, 1e-3)
        assert (cfg.lr_color.start, cfg.lr_color.end) == (1e-2, 1e-3)
        assert (cfg.lr_opacity.start, cfg.lr_opacity.end) == (0.05, None)
        assert (cfg.lr_rotation.start, cfg.lr_rotation.end) == (1e-3, None)
        assert cfg.timesteps.phase_switch_iter == 1000

    def test_validation(self):
        with pytest.raises(ValueError):
            OptimConfig(total_iters=-1)
        with pytest.raises(ValueError):
            OptimConfig(point_budget=0)
        with pytest.raises(ValueError):
            OptimConfig(batch_views=0)


class TestSelectLevel:
    def test_range_is_inclusive_of_composition_and_entities(self):
        rng = np.random.default_rng(0)
        draws = {select_level(rng, 2) for _ in range(200)}
        assert draws == {0, 1, 2}

    def test_no_entities_rejected(self):
        with pytest.raises(ValueError):
            select_level(np.random.default_rng(0), 0)

    def test_transcript_seed_7(self):
        # Frozen draw sequence; a change here breaks seeded reproducibility.
        rng = np.random.default_rng(7)
        assert [select_level(rng, 3) for _ in range(10)] == [3, 2, 2, 3, 2, 3, 3, 0, 0, 1]


class TestZoom:
    def test_worked_example(self):
        # Box [0.2, 0.4]^3 inside the canonical [-0.5, 0.5]^3: center 0.3,
        # extent ratio 1.0 / 0.2 = 5 on every axis.
        gs = random_gaussians(np.random.default_rng(0), 6, dtype=np.float64)
        bbox_l = Aabb3(np.full(3, 0.2), np.full(3, 0.4))
        bbox_std = Aabb3(np.full(3, -0.5), np.full(3, 0.5))
        zoomed, state = zoom_in(gs, bbox_l, bbox_std, entity_id=4)
        np.testing.assert_allclose(state.beta, [0.3, 0.3, 0.3], rtol=1e-15)
        assert state.lam == 5.0
        assert state.entity_id == 4
        np.testing.assert_allclose(zoomed.positions, (gs.positions - 0.3) * 5.0, rtol=1e-12, atol=1e-14)
        np.testing.assert_allclose(zoomed.log_scales, gs.log_scales + math.log(5.0), rtol=1e-12)

    def test_lam_uses_tightest_axis(self):
        gs = random_gaussians(np.random.default_rng(1), 4, dtype=np.float64)
        bbox_l = Aabb3([0.0, 0.0, 0.0], [0.5, 0.25, 0.1])
        bbox_std = Aabb3(np.full(3, -0.5), np.full(3, 0.5))
        _, state = zoom_in(gs, bbox_l, bbox_std)
        assert state.lam == pytest.approx(1.0 / 0.5)  # x axis binds

    def test_positions_only_leaves_scales(self):
        gs = random_gaussians(np.random.default_rng(2), 4, dtype=np.float64)
        bbox_l = Aabb3(np.full(3, 0.1), np.full(3, 0.3))
        bbox_std = Aabb3(np.full(3, -0.5), np.full(3, 0.5))
        zoomed, state = zoom_in(gs, bbox_l, bbox_std, scale_log_scales=False)
        assert not state.scales_shifted
        np.testing.assert_array_equal(zoomed.log_scales, gs.log_scales)
        back = zoom_back(zoomed, state)
        np.testing.assert_allclose(back.positions, gs.positions, rtol=1e-12, atol=1e-15)
        np.testing.assert_array_equal(back.log_scales, gs.log_scales)

    def test_zero_extent_axis_rejected(self):
        gs = random_gaussians(np.random.default_rng(3), 2, dtype=np.float64)
        flat = Aabb3([0.0, 0.0, 0.0], [0.5, 0.0, 0.5])
        with pytest.raises(DegenerateEntityError):
            zoom_in(gs, flat, Aabb3(np.full(3, -0.5), np.full(3, 0.5)))

    def test_zoom_does_not_mutate_input(self):
        gs = random_gaussians(np.random.default_rng(4), 5, dtype=np.float64)
        before = gs.positions.copy()
        zoom_in(gs, Aabb3(np.full(3, 0.1), np.full(3, 0.2)),
                Aabb3(np.full(3, -0.5), np.full(3, 0.5)))
        np.testing.assert_array_equal(gs.positions, before)

    @settings(max_examples=50, deadline=None)
    @given(
        seed=st.integers(0, 10_000),
        center=st.floats(-0.3, 0.3),
        half=st.floats(0.01, 0.45),
    )
    def test_round_trip_recovers_parameters(self, seed, center, half):
        gs = random_gaussians(np.random.default_rng(seed), 8, dtype=np.float64)
        bbox_l = Aabb3(np.full(3, center - half), np.full(3, center + half))
        bbox_std = Aabb3(np.full(3, -0.5), np.full(3, 0.5))
        zoomed, state = zoom_in(gs, bbox_l, bbox_std)
        back = zoom_back(zoomed, state)
        np.testing.assert_allclose(back.positions, gs.positions, rtol=1e-9, atol=1e-12)
        np.testing.assert_allclose(back.log_scales, gs.log_scales, rtol=1e-9, atol=1e-12)


class TestGradientMasking:
    def grads_of_ones(self, n):
        grads = GradientBuffer.zeros(n, dtype=np.float64)
        grads.d_positions[:] = 1.0
        grads.d_colors[:] = 0.5
        grads.d_opacities[:] = 0.25
        return grads

    def test_other_entity_rows_zeroed(self, rng):
        scene = random_scene(rng, count=10, n_entities=2, dtype=np.float64)
        grads = self.grads_of_ones(10)
        masked = mask_gradients(grads, scene, entity_id=1)
        mine = scene.gaussians.entity_tags == 1
        assert masked.nonzero_rows()[mine].all()
        assert not masked.nonzero_rows()[~mine].any()
        # original buffer untouched
        assert grads.nonzero_rows().all()

    def test_unknown_entity_rejected(self, rng):
        scene = random_scene(rng, count=6, n_entities=2, dtype=np.float64)
        with pytest.raises(UnknownEntityError):
            mask_gradients(self.grads_of_ones(6), scene, entity_id=9)

    def test_count_mismatch_rejected(self, rng):
        scene = random_scene(rng, count=6, n_entities=2, dtype=np.float64)
        with pytest.raises(ValueError):
            mask_gradients(self.grads_of_ones(5), scene, entity_id=1)

    def test_mask_frozen_zeroes_frozen_rows(self, rng):
        scene = random_scene(rng, count=10, n_entities=2, dtype=np.float64)
        scene.entity(2).frozen = True
        masked = mask_frozen(self.grads_of_ones(10), scene)
        frozen_rows = scene.gaussians.entity_tags == 2
        assert not masked.nonzero_rows()[frozen_rows].any()
        assert masked.nonzero_rows()[~frozen_rows].all()

    def test_mask_frozen_no_frozen_is_identity(self, rng):
        scene = random_scene(rng, count=6, n_entities=2, dtype=np.float64)
        grads = self.grads_of_ones(6)
        assert mask_frozen(grads, scene) is grads


class TestApplyUpdate:
    def test_position_step_matches_schedule(self, rng):
        gs = random_gaussians(rng, 4, dtype=np.float64)
        before = gs.positions.copy()
        grads = GradientBuffer.zeros(4, dtype=np.float64)
        grads.d_positions[:] = 2.0
        cfg = OptimConfig(total_iters=100)
        apply_update(gs, grads, iteration=0, config=cfg)
        lr = cfg.lr_position.value(0, 100)
        np.testing.assert_allclose(gs.positions, before - lr * 2.0, rtol=1e-12)

    def test_untouched_rows_keep_exact_bits(self, rng):
        gs = random_gaussians(rng, 5, dtype=np.float32)
        raw_before = {f: getattr(gs, f).copy() for f in ("positions", "rotations", "log_scales", "opacities", "colors")}
        grads = GradientBuffer.zeros(5, dtype=np.float64)
        grads.d_positions[2] = 1.0
        grads.d_colors[2] = 1.0
        apply_update(gs, grads, iteration=0, config=OptimConfig())
        others = [0, 1, 3, 4]
        for name, before in raw_before.items():
            np.testing.assert_array_equal(getattr(gs, name)[others], before[others])

    def test_rotation_step_renormalizes(self, rng):
        gs = random_gaussians(rng, 3, dtype=np.float64)
        grads = GradientBuffer.zeros(3, dtype=np.float64)
        grads.d_rotations[:] = rng.normal(size=(3, 4))
        apply_update(gs, grads, iteration=0, config=OptimConfig())
        np.testing.assert_allclose(np.linalg.norm(gs.rotations, axis=1), 1.0, rtol=1e-12)

    def test_rotation_step_that_cancels_falls_back_to_identity(self, rng):
        gs = random_gaussians(rng, 1, dtype=np.float64)
        gs.rotations[0] = [0.0, 1.0, 0.0, 0.0]
        cfg = OptimConfig()
        lr = cfg.lr_rotation.value(0, cfg.total_iters)
        grads = GradientBuffer.zeros(1, dtype=np.float64)
        grads.d_rotations[0] = gs.rotations[0] / lr  # exact cancellation
        apply_update(gs, grads, iteration=0, config=cfg)
        np.testing.assert_array_equal(gs.rotations[0], [1.0, 0.0, 0.0, 0.0])

    def test_opacity_and_color_clipped(self, rng):
        gs = random_gaussians(rng, 2, dtype=np.float64)
        gs.opacities[:] = [0.01, 0.99]
        gs.colors[:] = 0.5
        grads = GradientBuffer.zeros(2, dtype=np.float64)
        grads.d_opacities[:] = [10.0, -10.0]  # pushes past both ends
        grads.d_colors[0, :] = 1e4
        grads.d_colors[1, :] = -1e4
        apply_update(gs, grads, iteration=0, config=OptimConfig())
        np.testing.assert_array_equal(gs.opacities, [0.0, 1.0])
        np.testing.assert_array_equal(gs.colors[0], 0.0)
        np.testing.assert_array_equal(gs.colors[1], 1.0)

    def test_non_finite_gradient_rejected(self, rng):
        gs = random_gaussians(rng, 2, dtype=np.float64)
        grads = GradientBuffer.zeros(2, dtype=np.float64)
        grads.d_positions[0, 0] = np.nan
        with pytest.raises(NonFiniteGradientError):
            apply_update(gs, grads, iteration=0, config=OptimConfig())

    def test_count_mismatch_rejected(self, rng):
        gs = random_gaussians(rng, 3, dtype=np.float64)
        with pytest.raises(ValueError):
            apply_update(gs, GradientBuffer.zeros(4, dtype=np.float64), 0, OptimConfig())

    def test_scene_target_skips_frozen_entities(self, rng):
        scene = random_scene(rng, count=8, n_entities=2, dtype=np.float64)
        scene.entity(1).frozen = True
        before = scene.gaussians.positions.copy()
        grads = GradientBuffer.zeros(8, dtype=np.float64)
        grads.d_positions[:] = 1.0
        apply_update(scene, grads, iteration=0, config=OptimConfig())
        frozen_rows = scene.gaussians.entity_tags == 1
        np.testing.assert_array_equal(scene.gaussians.positions[frozen_rows], before[frozen_rows])
        assert not np.array_equal(scene.gaussians.positions[~frozen_rows], before[~frozen_rows])


class TestGradAccumulator:
    def test_mean_over_touched_steps_only(self):
        acc = GradAccumulator(3)
        d = np.zeros((3, 3))
        d[0] = [1.0, 0.0, 0.0]  # norm 1
        acc.add(d)
        d[0] = [0.0, 3.0, 0.0]  # norm 3
        acc.add(d)
        means = acc.mean_norms()
        assert means[0] == pytest.approx(2.0)
        assert means[1] == 0.0 and means[2] == 0.0

    def test_subset_rows_map_to_full_buffer(self):
        acc = GradAccumulator(5)
        sub = np.zeros((2, 3))
        sub[0] = [2.0, 0.0, 0.0]
        sub[1] = [0.0, 4.0, 0.0]
        acc.add(sub, rows=np.array([1, 3]))
        means = acc.mean_norms()
        np.testing.assert_allclose(means, [0.0, 2.0, 0.0, 4.0, 0.0])


def uniform_scene(count, opacity=0.5, log_scale=math.log(0.02), n_entities=1):
    rng = np.random.default_rng(99)
    scene = random_scene(rng, count=count, n_entities=n_entities, dtype=np.float64)
    scene.gaussians.opacities[:] = opacity
    scene.gaussians.log_scales[:] = log_scale
    scene.gaussians.rotations[:] = [1.0, 0.0, 0.0, 0.0]
    return scene


class TestDensifyAndPrune:
    def test_prune_removes_faint_rows(self):
        scene = uniform_scene(4)
        scene.gaussians.opacities[1] = 1e-4
        stats = densify_and_prune(scene, np.zeros(4), OptimConfig(), np.random.default_rng(0))
        assert stats == {"pruned": 1, "cloned": 0, "split": 0, "count": 3}

    def test_split_replaces_parent_with_two_children(self):
        scene = uniform_scene(1)
        scene.gaussians.positions[0] = [0.0, 0.0, 0.0]
        scene.gaussians.log_scales[0] = np.log([0.2, 0.01, 0.01])
        stats = densify_and_prune(scene, np.zeros(1), OptimConfig(), np.random.default_rng(0))
        assert stats["split"] == 1 and stats["count"] == 2
        gs = scene.gaussians
        # children sit half a major-axis sigma either side of the parent
        np.testing.assert_allclose(sorted(gs.positions[:, 0]), [-0.1, 0.1], atol=1e-12)
        np.testing.assert_allclose(np.exp(gs.log_scales[0]), [0.1, 0.005, 0.005], rtol=1e-12)

    def test_clone_adds_jittered_copy(self):
        scene = uniform_scene(2)
        norms = np.array([0.0, 1.0])  # row 1 over the gradient threshold
        stats = densify_and_prune(scene, norms, OptimConfig(), np.random.default_rng(0))
        assert stats == {"pruned": 0, "cloned": 1, "split": 0, "count": 3}
        gs = scene.gaussians
        np.testing.assert_array_equal(gs.colors[2], gs.colors[1])
        assert not np.array_equal(gs.positions[2], gs.positions[1])

    def test_budget_caps_growth_prefers_splits(self):
        scene = uniform_scene(4)
        scene.gaussians.log_scales[:2] = math.log(0.2)  # rows 0, 1 oversized
        norms = np.array([0.0, 0.0, 1.0, 1.0])  # rows 2, 3 clone candidates
        cfg = OptimConfig(point_budget=7)
        stats = densify_and_prune(scene, norms, cfg, np.random.default_rng(0))
        # two splits (+2) fit; only one of the two clones does
        assert stats["split"] == 2 and stats["cloned"] == 1
        assert stats["count"] == 7

    def test_budget_zero_headroom_means_no_growth(self):
        scene = uniform_scene(3)
        scene.gaussians.log_scales[:] = math.log(0.2)
        cfg = OptimConfig(point_budget=3)
        stats = densify_and_prune(scene, np.ones(3), cfg, np.random.default_rng(0))
        assert stats["count"] == 3 and stats["split"] == 0 and stats["cloned"] == 0

    def test_frozen_entity_untouched(self):
        scene = uniform_scene(6, n_entities=2)
        scene.entity(2).frozen = True
        rows = entity_indices(scene, 2)
        scene.gaussians.opacities[rows] = 1e-4  # would prune if mutable
        scene.gaussians.log_scales[rows] = math.log(0.3)  # would split if mutable
        before = scene.gaussians.take(rows)
        densify_and_prune(scene, np.ones(6), OptimConfig(), np.random.default_rng(0))
        after = scene.gaussians.take(entity_indices(scene, 2))
        np.testing.assert_array_equal(after.positions, before.positions)
        np.testing.assert_array_equal(after.opacities, before.opacities)

    def test_norms_shape_mismatch_rejected(self):
        scene = uniform_scene(3)
        with pytest.raises(ValueError):
            densify_and_prune(scene, np.zeros(2), OptimConfig(), np.random.default_rng(0))


class TestOptimReport:
    def test_csv_round_trip_precision(self):
        report = OptimReport()
        report.append(ReportRow(0, 1, 0.123456789012345, 3.14159e-7, 28.1234567, 512))
        text = report.to_csv()
        lines = text.strip().split("\n")
        assert lines[0] == "iteration,level,timestep,loss,psnr,gaussian_count"
        cells = lines[1].split(",")
        assert float(cells[2]) == 0.123456789012345  # repr keeps all bits
        assert float(cells[3]) == 3.14159e-7
        assert report.final_loss() == 3.14159e-7

    def test_empty_report_final_loss_is_nan(self):
        assert math.isnan(OptimReport().final_loss())


def tiny_training_setup(scene, size=24, weight=0.05):
    """Photometric targets for the composition and every entity prompt."""
    intr = Intrinsics(fov_y=40.0, width=size, height=size)
    poses = turntable_poses(3, distance=2.0)
    targets = {0: [
        TargetView(pose=p, intrinsics=intr, image=render(scene, p, intr).rgb)
        for p in poses
    ]}
    for meta in scene.entities:
        targets[meta.id] = [
            TargetView(pose=p, intrinsics=intr, image=np.full((size, size, 3), 0.4))
            for p in poses
        ]
    provider = PhotometricProvider(targets, weight_fn=lambda t, _w=weight: _w)
    return ProviderSet.single(provider)


def tiny_config(**overrides):
    base = dict(
        total_iters=6,
        batch_views=2,
        render_width=24,
        render_height=24,
        densify_interval=0,
        bbox_refresh_every=3,
        point_budget=64,
        seed=0,
    )
    base.update(overrides)
    return OptimConfig(**base)


class TestRunDynamicOptimization:
    def test_report_covers_every_iteration(self, rng):
        scene = random_scene(rng, count=12, n_entities=2, dtype=np.float64)
        providers = tiny_training_setup(scene)
        report = run_dynamic_optimization(scene, tiny_config(), providers)
        assert [r.iteration for r in report.rows] == list(range(6))
        assert all(r.gaussian_count == 12 for r in report.rows)
        assert all(np.isfinite(r.loss) for r in report.rows)

    def test_on_step_observes_each_iteration(self, rng):
        scene = random_scene(rng, count=12, n_entities=2, dtype=np.float64)
        providers = tiny_training_setup(scene)
        seen = []
        report = run_dynamic_optimization(
            scene, tiny_config(), providers,
            on_step=lambda i, level, s: seen.append((i, level, s.gaussians.count)),
        )
        assert [i for i, _, _ in seen] == list(range(6))
        assert [lvl for _, lvl, _ in seen] == [r.level for r in report.rows]

    def test_no_do_keeps_every_step_at_composition_level(self, rng):
        scene = random_scene(rng, count=12, n_entities=2, dtype=np.float64)
        providers = tiny_training_setup(scene)
        report = run_dynamic_optimization(scene, tiny_config(no_do=True), providers)
        assert all(r.level == 0 for r in report.rows)

    def test_entity_levels_appear_by_default(self, rng):
        scene = random_scene(rng, count=12, n_entities=2, dtype=np.float64)
        providers = tiny_training_setup(scene)
        report = run_dynamic_optimization(scene, tiny_config(total_iters=12), providers)
        assert {r.level for r in report.rows} > {0}

    def test_same_seed_reproduces_csv_exactly(self, rng):
        scene_a = random_scene(rng, count=12, n_entities=2, dtype=np.float64)
        scene_b = scene_a.copy()
        csv_a = run_dynamic_optimization(scene_a, tiny_config(), tiny_training_setup(scene_a)).to_csv()
        csv_b = run_dynamic_optimization(scene_b, tiny_config(), tiny_training_setup(scene_b)).to_csv()
        assert csv_a == csv_b
        np.testing.assert_array_equal(scene_a.gaussians.positions, scene_b.gaussians.positions)
        np.testing.assert_array_equal(scene_a.gaussians.colors, scene_b.gaussians.colors)

    def test_frozen_entity_rows_bit_identical(self, rng):
        scene = random_scene(rng, count=12, n_entities=2, dtype=np.float64)
        scene.entity(2).frozen = True
        rows = entity_indices(scene, 2)
        before = scene.gaussians.take(rows)
        providers = tiny_training_setup(scene)
        run_dynamic_optimization(scene, tiny_config(total_iters=8), providers)
        after = scene.gaussians.take(rows)
        for f in ("positions", "rotations", "log_scales", "opacities", "colors"):
            np.testing.assert_array_equal(getattr(after, f), getattr(before, f))

    def test_point_budget_never_exceeded(self, rng):
        scene = random_scene(rng, count=12, n_entities=2, dtype=np.float64)
        providers = tiny_training_setup(scene)
        cfg = tiny_config(
            total_iters=10,
            point_budget=16,
            densify_interval=2,
            densify_start=2,
            tau_size=1e-6,  # every mutable row is a split candidate
        )
        counts = []
        run_dynamic_optimization(
            scene, cfg, providers, on_step=lambda i, lvl, s: counts.append(s.gaussians.count)
        )
        assert max(counts) <= 16
        assert scene.gaussians.count == 16  # growth happened, then the cap bound

    def test_missing_entity_prompt_aborts_with_partial_report(self, rng):
        scene = random_scene(rng, count=12, n_entities=2, dtype=np.float64)
        intr = Intrinsics(fov_y=40.0, width=24, height=24)
        poses = turntable_poses(3, distance=2.0)
        targets = {0: [
            TargetView(pose=p, intrinsics=intr, image=render(scene, p, intr).rgb)
            for p in poses
        ]}  # no targets for entity prompts 1 and 2
        providers = ProviderSet.single(PhotometricProvider(targets, weight_fn=lambda t: 0.05))
        with pytest.raises(OptimizationAborted) as info:
            run_dynamic_optimization(scene, tiny_config(total_iters=40), providers)
        assert len(info.value.partial_report.rows) < 40

    def test_zero_iterations_returns_empty_report(self, rng):
        scene = random_scene(rng, count=12, n_entities=2, dtype=np.float64)
        providers = tiny_training_setup(scene)
        report = run_dynamic_optimization(scene, tiny_config(total_iters=0), providers)
        assert report.rows == []

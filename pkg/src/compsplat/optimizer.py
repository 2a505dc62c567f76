"""Dynamic optimization loop: level selection, gradient masking, zoom.

Each iteration draws a level (0 = whole composition, l >= 1 = one entity),
renders a small batch of views, turns guidance residuals into parameter
gradients, and applies per-group SGD steps. Entity-level steps operate in a
zoomed frame where the entity's bounding box fills the canonical box, so
small entities receive usefully large updates. Densification, pruning and
bounding-box refresh run on fixed schedules.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .camera import CameraPose, CameraRanges, Intrinsics, sample_training_camera
from .guidance import (
    GuidanceError,
    GuidanceRequest,
    GuidanceResponse,
    ProviderSet,
    TimestepSchedule,
    assemble_guidance_gradient,
    sample_timestep,
)
from .rendering import DEFAULT_BACKGROUND, GradientBuffer, quaternion_to_rotation, render
from .runtime import thread_count
from .scene import (
    Aabb3,
    EmptyEntityError,
    GaussianSet,
    Scene,
    compute_entity_bbox,
    entity_indices,
    frozen_row_mask,
    refresh_entity_bboxes,
)


class DegenerateEntityError(ValueError):
    """Entity bounding box has a zero-extent axis; zooming is undefined."""


class NonFiniteGradientError(RuntimeError):
    """Gradient buffer contains NaN or infinity; the step must be skipped."""


class OptimizationAborted(RuntimeError):
    """Provider or transport failure stopped the loop early."""

    def __init__(self, message: str, partial_report: "OptimReport"):
        super().__init__(message)
        self.partial_report = partial_report


@dataclass(frozen=True)
class LrSchedule:
    """Per-group learning rate: constant, or linear between two endpoints."""

    start: float
    end: float | None = None

    def __post_init__(self):
        if self.start <= 0:
            raise ValueError(f"learning rate must be > 0, got {self.start}")
        if self.end is not None and self.end <= 0:
            raise ValueError(f"learning rate must be > 0, got {self.end}")

    def value(self, iteration: int, total_iters: int) -> float:
        if self.end is None or total_iters <= 1:
            return self.start
        u = iteration / (total_iters - 1)
        return self.start * (1.0 - u) + self.end * u


@dataclass
class OptimConfig:
    total_iters: int = 2000
    lr_position: LrSchedule = field(default_factory=lambda: LrSchedule(1e-3, 1e-5))
    lr_scale: LrSchedule = field(default_factory=lambda: LrSchedule(1e-2, 1e-3))
    lr_color: LrSchedule = field(default_factory=lambda: LrSchedule(1e-2, 1e-3))
    lr_opacity: LrSchedule = field(default_factory=lambda: LrSchedule(0.05))
    lr_rotation: LrSchedule = field(default_factory=lambda: LrSchedule(1e-3))
    point_budget: int = 10_000
    batch_views: int = 4
    no_do: bool = False
    no_vao: bool = False
    random_init: bool = False
    vao_positions_only: bool = False
    mask_by_containment: bool = False  # entity rows by bbox membership, not tag
    bbox_refresh_every: int = 100
    densify_interval: int = 200
    densify_start: int = 200
    tau_grad: float = 2e-4
    tau_size: float = 0.05
    tau_prune: float = 0.005
    clone_jitter: float = 0.1
    cameras: CameraRanges = field(default_factory=CameraRanges)
    timesteps: TimestepSchedule = field(default_factory=TimestepSchedule)
    render_width: int = 128
    render_height: int = 128
    background: tuple[float, float, float] = DEFAULT_BACKGROUND
    seed: int = 0

    def __post_init__(self):
        if self.total_iters < 0:
            raise ValueError(f"total_iters must be >= 0, got {self.total_iters}")
        if self.point_budget < 1:
            raise ValueError(f"point_budget must be >= 1, got {self.point_budget}")
        if self.batch_views < 1:
            raise ValueError(f"batch_views must be >= 1, got {self.batch_views}")


@dataclass
class ZoomState:
    beta: np.ndarray  # (3,) box center
    lam: float
    entity_id: int
    scales_shifted: bool = True

    def __post_init__(self):
        self.beta = np.asarray(self.beta, dtype=np.float64).reshape(3)
        if not self.lam > 0:
            raise ValueError(f"zoom scale must be > 0, got {self.lam}")


def select_level(rng: np.random.Generator, levels: int) -> int:
    """Uniform draw over {0..levels}; 0 is the composition level."""
    if levels < 1:
        raise ValueError(f"need at least one entity level, got {levels}")
    return int(rng.integers(0, levels + 1))


def zoom_in(
    gaussians: GaussianSet,
    bbox_l: Aabb3,
    bbox_std: Aabb3,
    entity_id: int = 0,
    scale_log_scales: bool = True,
) -> tuple[GaussianSet, ZoomState]:
    """Map an entity into the canonical box: positions to lam*(mu - beta).

    lam is the minimum per-axis extent ratio, so the zoomed entity fits the
    canonical box without aspect distortion. Per-Gaussian scales follow the
    zoom (log_scales + ln lam) unless scale_log_scales is off.
    """
    extent = bbox_l.extent
    if np.any(extent <= 0):
        raise DegenerateEntityError(
            f"entity {entity_id} bounding box has zero extent on an axis: {extent}"
        )
    beta = bbox_l.center
    lam = float(np.min(bbox_std.extent / extent))
    out = gaussians.copy()
    dtype = out.dtype
    out.positions[:] = ((out.positions.astype(np.float64) - beta) * lam).astype(dtype)
    if scale_log_scales:
        out.log_scales[:] = (out.log_scales.astype(np.float64) + math.log(lam)).astype(dtype)
    return out, ZoomState(beta=beta, lam=lam, entity_id=entity_id, scales_shifted=scale_log_scales)


def zoom_back(gaussians: GaussianSet, state: ZoomState) -> GaussianSet:
    """Inverse of zoom_in: mu = mu_hat / lam + beta."""
    if not state.lam > 0:
        raise ValueError(f"zoom scale must be > 0, got {state.lam}")
    out = gaussians.copy()
    dtype = out.dtype
    out.positions[:] = (out.positions.astype(np.float64) / state.lam + state.beta).astype(dtype)
    if state.scales_shifted:
        out.log_scales[:] = (out.log_scales.astype(np.float64) - math.log(state.lam)).astype(dtype)
    return out


def mask_gradients(grads: GradientBuffer, scene: Scene, entity_id: int) -> GradientBuffer:
    """Zero every gradient row whose Gaussian is not tagged entity_id."""
    scene.entity(entity_id)  # raises UnknownEntityError
    if grads.count != scene.gaussians.count:
        raise ValueError(
            f"gradient buffer holds {grads.count} rows, scene has {scene.gaussians.count}"
        )
    out = grads.copy()
    out.zero_rows_(np.flatnonzero(scene.gaussians.entity_tags != entity_id))
    return out


def mask_frozen(grads: GradientBuffer, scene: Scene) -> GradientBuffer:
    """Zero gradient rows belonging to frozen entities; no-op copy otherwise."""
    frozen = frozen_row_mask(scene)
    if not frozen.any():
        return grads
    out = grads.copy()
    out.zero_rows_(np.flatnonzero(frozen))
    return out


def apply_update(
    target: Scene | GaussianSet,
    grads: GradientBuffer,
    iteration: int,
    config: OptimConfig,
) -> None:
    """One SGD step, in place. Only rows with a nonzero gradient in a field
    are written in that field, so fully-masked rows keep their exact bits.
    """
    if not grads.all_finite():
        raise NonFiniteGradientError(f"non-finite gradients at iteration {iteration}")
    if isinstance(target, Scene):
        grads = mask_frozen(grads, target)
        gs = target.gaussians
    else:
        gs = target
    if grads.count != gs.count:
        raise ValueError(f"gradient buffer holds {grads.count} rows, target has {gs.count}")

    total = config.total_iters
    dtype = gs.dtype

    def rows_of(arr: np.ndarray) -> np.ndarray:
        nz = arr != 0
        return np.flatnonzero(nz.any(axis=1) if nz.ndim > 1 else nz)

    rows = rows_of(grads.d_positions)
    if rows.size:
        lr = config.lr_position.value(iteration, total)
        gs.positions[rows] -= (lr * grads.d_positions[rows]).astype(dtype)

    rows = rows_of(grads.d_rotations)
    if rows.size:
        lr = config.lr_rotation.value(iteration, total)
        gs.rotations[rows] -= (lr * grads.d_rotations[rows]).astype(dtype)
        quats = gs.rotations[rows]
        norms = np.linalg.norm(quats, axis=1, keepdims=True)
        bad = norms[:, 0] == 0
        if bad.any():  # a step that cancels the quaternion exactly
            quats[bad] = np.array([1.0, 0.0, 0.0, 0.0], dtype=dtype)
            norms[bad] = 1.0
        gs.rotations[rows] = quats / norms

    rows = rows_of(grads.d_log_scales)
    if rows.size:
        lr = config.lr_scale.value(iteration, total)
        gs.log_scales[rows] -= (lr * grads.d_log_scales[rows]).astype(dtype)

    rows = rows_of(grads.d_opacities)
    if rows.size:
        lr = config.lr_opacity.value(iteration, total)
        gs.opacities[rows] -= (lr * grads.d_opacities[rows]).astype(dtype)
        gs.opacities[rows] = np.clip(gs.opacities[rows], 0.0, 1.0)

    rows = rows_of(grads.d_colors)
    if rows.size:
        lr = config.lr_color.value(iteration, total)
        gs.colors[rows] -= (lr * grads.d_colors[rows]).astype(dtype)
        gs.colors[rows] = np.clip(gs.colors[rows], 0.0, 1.0)


class GradAccumulator:
    """Running mean of per-Gaussian position-gradient norms between
    densification events."""

    def __init__(self, count: int):
        self.sum_norm = np.zeros(count, dtype=np.float64)
        self.hits = np.zeros(count, dtype=np.int64)

    def add(self, d_positions: np.ndarray, rows: np.ndarray | None = None) -> None:
        norms = np.linalg.norm(np.asarray(d_positions, dtype=np.float64), axis=1)
        if rows is None:
            touched = norms > 0
            self.sum_norm[touched] += norms[touched]
            self.hits[touched] += 1
        else:
            touched = norms > 0
            self.sum_norm[rows[touched]] += norms[touched]
            self.hits[rows[touched]] += 1

    def mean_norms(self) -> np.ndarray:
        return self.sum_norm / np.maximum(self.hits, 1)


def densify_and_prune(
    scene: Scene,
    mean_grad_norms: np.ndarray,
    config: OptimConfig,
    rng: np.random.Generator,
) -> dict[str, int]:
    """Clone under-covered Gaussians, split oversized ones, prune faint ones.

    Frozen entities are left untouched. Growth is capped so the count never
    exceeds the point budget; splits win over clones when the cap binds.
    """
    gs = scene.gaussians
    n = gs.count
    if mean_grad_norms.shape != (n,):
        raise ValueError(f"grad norms shape {mean_grad_norms.shape} does not match count {n}")
    frozen = frozen_row_mask(scene)
    mutable = ~frozen

    prune_mask = mutable & (gs.opacities < config.tau_prune)
    max_scale = np.exp(gs.log_scales).max(axis=1)
    split_mask = mutable & ~prune_mask & (max_scale > config.tau_size)
    clone_mask = mutable & ~prune_mask & ~split_mask & (mean_grad_norms > config.tau_grad)

    survivors = int(n - prune_mask.sum())
    allowed = max(config.point_budget - survivors, 0)
    split_idx = np.flatnonzero(split_mask)
    clone_idx = np.flatnonzero(clone_mask)
    if split_idx.size + clone_idx.size > allowed:
        if split_idx.size >= allowed:
            split_idx = split_idx[:allowed]
            clone_idx = clone_idx[:0]
        else:
            clone_idx = clone_idx[: allowed - split_idx.size]

    # splits replace their parent with two half-scale children
    split_applied = np.zeros(n, dtype=bool)
    split_applied[split_idx] = True
    keep = ~prune_mask & ~split_applied

    parts = [gs.take(np.flatnonzero(keep))]

    if clone_idx.size:
        clones = gs.take(clone_idx)
        sigma = np.exp(clones.log_scales)
        jitter = rng.standard_normal(clones.positions.shape) * (config.clone_jitter * sigma)
        clones.positions[:] = (clones.positions.astype(np.float64) + jitter).astype(gs.dtype)
        parts.append(clones)

    if split_idx.size:
        parents = gs.take(split_idx)
        sigma = np.exp(parents.log_scales.astype(np.float64))
        major = np.argmax(parents.log_scales, axis=1)
        offsets = np.empty((split_idx.size, 3), dtype=np.float64)
        for j in range(split_idx.size):
            axis = quaternion_to_rotation(parents.rotations[j])[:, major[j]]
            offsets[j] = 0.5 * sigma[j, major[j]] * axis
        lo = parents.copy()
        hi = parents.copy()
        lo.positions[:] = (lo.positions.astype(np.float64) - offsets).astype(gs.dtype)
        hi.positions[:] = (hi.positions.astype(np.float64) + offsets).astype(gs.dtype)
        half = np.float64(math.log(2.0))
        for child in (lo, hi):
            child.log_scales[:] = (child.log_scales.astype(np.float64) - half).astype(gs.dtype)
        parts.extend([lo, hi])

    scene.gaussians = GaussianSet.concatenate(parts)
    return {
        "pruned": int(prune_mask.sum()),
        "cloned": int(clone_idx.size),
        "split": int(split_idx.size),
        "count": scene.gaussians.count,
    }


@dataclass
class ReportRow:
    iteration: int
    level: int
    timestep: float
    loss: float
    psnr: float
    gaussian_count: int


@dataclass
class OptimReport:
    rows: list[ReportRow] = field(default_factory=list)
    skipped_steps: int = 0

    CSV_HEADER = "iteration,level,timestep,loss,psnr,gaussian_count"

    def append(self, row: ReportRow) -> None:
        self.rows.append(row)

    def final_loss(self) -> float:
        return self.rows[-1].loss if self.rows else math.nan

    def to_csv(self) -> str:
        lines = [self.CSV_HEADER]
        for r in self.rows:
            lines.append(
                f"{r.iteration},{r.level},{r.timestep!r},{r.loss!r},{r.psnr!r},{r.gaussian_count}"
            )
        return "\n".join(lines) + "\n"

    def write_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_csv())


def _loss_of(residual: np.ndarray) -> float:
    return 0.5 * float(np.sum(np.asarray(residual, dtype=np.float64) ** 2))


def _psnr_of(residual: np.ndarray) -> float:
    mse = float(np.mean(np.asarray(residual, dtype=np.float64) ** 2))
    if mse <= 0.0:
        return math.inf
    if math.isinf(mse):
        return -math.inf
    return 10.0 * math.log10(1.0 / mse)


def _draw_cameras(
    rng: np.random.Generator,
    provider,
    prompt_id: int,
    config: OptimConfig,
) -> list[tuple[CameraPose, Intrinsics]]:
    """Batch cameras: drawn from the provider's stored views when it has
    them (supervised prompts), sampled from the configured ranges otherwise."""
    stored = provider.cameras_for(prompt_id)
    if stored:
        k = min(config.batch_views, len(stored))
        picks = rng.choice(len(stored), size=k, replace=False)
        return [(stored[int(j)].pose, stored[int(j)].intrinsics) for j in picks]
    return [
        sample_training_camera(rng, config.cameras, config.render_width, config.render_height)
        for _ in range(config.batch_views)
    ]


def run_dynamic_optimization(
    scene: Scene,
    config: OptimConfig,
    providers: ProviderSet,
    on_step: Callable[[int, int, Scene], None] | None = None,
) -> OptimReport:
    """Algorithm: per iteration, pick a level, render a view batch, assemble
    guidance gradients (mean over the batch), step, and housekeep.

    Composition steps (level 0) sum the 2D-slot and 3D-slot gradients over
    the full scene; entity steps zoom the entity into the canonical box,
    supervise it with its own prompt through the 3D slot, and zoom back.
    Frozen entities are never selected and receive zero updates everywhere.
    on_step, when given, observes (iteration, level, scene) after each step;
    it must not mutate the scene.
    """
    report = OptimReport()
    rng = np.random.default_rng(config.seed)
    _refresh_bboxes(scene)
    accum = GradAccumulator(scene.gaussians.count)
    workers = thread_count()

    with ThreadPoolExecutor(max_workers=workers) as pool:
        for i in range(config.total_iters):
            present = set(np.unique(scene.gaussians.entity_tags).tolist())
            selectable = [e.id for e in scene.entities if not e.frozen and e.id in present]
            if config.no_do or not selectable:
                level = 0
            else:
                pick = select_level(rng, len(selectable))
                level = 0 if pick == 0 else selectable[pick - 1]
            t = sample_timestep(i, config.timesteps, rng)

            try:
                if level == 0:
                    loss, psnr = _composition_step(scene, config, providers, rng, pool, i, t, accum, report)
                else:
                    loss, psnr = _entity_step(scene, config, providers, rng, pool, i, t, level, accum, report)
            except GuidanceError as exc:
                raise OptimizationAborted(
                    f"guidance failed at iteration {i}: {exc}", report
                ) from exc

            report.append(
                ReportRow(
                    iteration=i,
                    level=level,
                    timestep=t,
                    loss=loss,
                    psnr=psnr,
                    gaussian_count=scene.gaussians.count,
                )
            )
            if on_step is not None:
                on_step(i, level, scene)

            step = i + 1
            if config.bbox_refresh_every > 0 and step % config.bbox_refresh_every == 0:
                _refresh_bboxes(scene)
            if (
                config.densify_interval > 0
                and step >= config.densify_start
                and step % config.densify_interval == 0
                and step < config.total_iters
            ):
                densify_and_prune(scene, accum.mean_norms(), config, rng)
                accum = GradAccumulator(scene.gaussians.count)

    return report


def _refresh_bboxes(scene: Scene) -> None:
    try:
        refresh_entity_bboxes(scene)
    except EmptyEntityError:
        # a fully-pruned entity keeps its last bounding box
        for meta in scene.entities:
            if entity_indices(scene, meta.id).size:
                compute_entity_bbox(scene, meta.id)


def _render_batch(pool, target, cameras, background):
    def one(pair):
        pose, intr = pair
        return render(target, pose, intr, background=background)

    return list(pool.map(one, cameras))


def _composition_step(scene, config, providers, rng, pool, iteration, t, accum, report):
    cameras = _draw_cameras(rng, providers.provider_3d, 0, config)
    images = _render_batch(pool, scene, cameras, config.background)

    responses: list[tuple[GuidanceResponse, GuidanceResponse]] = []
    for (pose, intr), img in zip(cameras, images):
        req = GuidanceRequest.from_render(iteration, t, 0, pose, intr, img)
        responses.append((providers.provider_2d.respond(req), providers.provider_3d.respond(req)))

    def backprop(j):
        pose, intr = cameras[j]
        r2, r3 = responses[j]
        g = assemble_guidance_gradient(r2, scene, pose, intr, background=config.background)
        g.add_(assemble_guidance_gradient(r3, scene, pose, intr, background=config.background))
        return g

    grads = GradientBuffer.zeros(scene.gaussians.count, dtype=np.float64)
    for g in pool.map(backprop, range(len(cameras))):
        grads.add_(g)
    grads.scale_(1.0 / len(cameras))

    grads = mask_frozen(grads, scene)
    loss = float(np.mean([_loss_of(r2.residual) + _loss_of(r3.residual) for r2, r3 in responses]))
    psnr = float(np.mean([_psnr_of(r3.residual) for _, r3 in responses]))
    try:
        apply_update(scene, grads, iteration, config)
        accum.add(grads.d_positions)
    except NonFiniteGradientError:
        report.skipped_steps += 1
    return loss, psnr


def _entity_step(scene, config, providers, rng, pool, iteration, t, entity_id, accum, report):
    meta = scene.entity(entity_id)
    if config.mask_by_containment:
        inside = meta.bbox.contains(scene.gaussians.positions.astype(np.float64))
        rows = np.flatnonzero(inside & ~frozen_row_mask(scene))
        if rows.size == 0:
            rows = entity_indices(scene, entity_id)
    else:
        rows = entity_indices(scene, entity_id)
    ent = scene.gaussians.take(rows)

    zstate = None
    working = ent
    if not config.no_vao:
        working, zstate = zoom_in(
            ent,
            meta.bbox,
            scene.bbox_std,
            entity_id=entity_id,
            scale_log_scales=not config.vao_positions_only,
        )

    cameras = _draw_cameras(rng, providers.provider_3d, entity_id, config)
    images = _render_batch(pool, working, cameras, config.background)

    responses = []
    for (pose, intr), img in zip(cameras, images):
        req = GuidanceRequest.from_render(iteration, t, entity_id, pose, intr, img)
        responses.append(providers.provider_3d.respond(req))

    def backprop(j):
        pose, intr = cameras[j]
        return assemble_guidance_gradient(responses[j], working, pose, intr, background=config.background)

    grads = GradientBuffer.zeros(working.count, dtype=np.float64)
    for g in pool.map(backprop, range(len(cameras))):
        grads.add_(g)
    grads.scale_(1.0 / len(cameras))

    loss = float(np.mean([_loss_of(r.residual) for r in responses]))
    psnr = float(np.mean([_psnr_of(r.residual) for r in responses]))
    try:
        apply_update(working, grads, iteration, config)
        accum.add(grads.d_positions, rows=rows)
    except NonFiniteGradientError:
        report.skipped_steps += 1
        return loss, psnr

    restored = zoom_back(working, zstate) if zstate is not None else working
    scene.gaussians.write_rows(rows, restored)
    return loss, psnr

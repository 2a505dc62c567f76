"""Command-line entry points: init, optimize, render, edit-add.

Each subcommand is a thin shell over the library modules; all real logic
lives there. Domain errors exit with status 1 and a one-line message.

Environment: COMPSPLAT_THREADS caps render parallelism, COMPSPLAT_PRECISION
(f32|f64) selects the training dtype.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import replace

import numpy as np

from . import assets_io
from .camera import Intrinsics, turntable_poses
from .guidance import (
    GuidanceError,
    PhotometricProvider,
    ProviderSet,
    RemoteProvider,
)
from .initializer import add_entity
from .optimizer import OptimizationAborted, run_dynamic_optimization
from .rendering import render
from .scene import entity_indices


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="compsplat",
        description="Compositional Gaussian-splatting scenes: build, optimize, render, edit.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("init", help="build the initial Gaussian scene from a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="output Gaussian PLY path")
    p.add_argument("--seed", type=int, default=None, help="override the manifest seed")
    p.add_argument(
        "--scalar-nn",
        action="store_true",
        help="use one global nearest-neighbor distance instead of per-point",
    )

    p = sub.add_parser("optimize", help="run the dynamic optimization loop")
    p.add_argument("--manifest", required=True)
    p.add_argument("--scene", required=True, help="initial Gaussian PLY (from init)")
    p.add_argument("--out", required=True, help="trained Gaussian PLY path")
    p.add_argument("--report", required=True, help="per-iteration CSV path")
    p.add_argument("--seed", type=int, default=None, help="override the manifest seed")
    p.add_argument("--ablate", choices=("no_do", "no_vao", "random_init"), default=None)
    p.add_argument(
        "--guidance",
        default=None,
        metavar="photometric|remote:HOST:PORT",
        help="override the manifest guidance source",
    )
    p.add_argument(
        "--mask-by-containment",
        action="store_true",
        help="entity steps own bbox-contained Gaussians instead of tagged ones",
    )

    p = sub.add_parser("render", help="render stored views of a trained scene")
    p.add_argument("--scene", required=True)
    p.add_argument("--views", default="turntable:8", metavar="turntable:N")
    p.add_argument("--outdir", required=True)
    p.add_argument("--entity", type=int, default=None, help="render one entity alone")
    p.add_argument("--width", type=int, default=Intrinsics().width)
    p.add_argument("--height", type=int, default=Intrinsics().height)
    p.add_argument("--fov-y", type=float, default=Intrinsics().fov_y)
    p.add_argument("--format", choices=("ppm", "png"), default="ppm")

    p = sub.add_parser("edit-add", help="append a new entity to a trained scene")
    p.add_argument("--scene", required=True)
    p.add_argument("--mesh", required=True)
    p.add_argument("--prompt", required=True)
    p.add_argument("--entity-id", type=int, default=None, help="default: max existing id + 1")
    p.add_argument("--points", type=int, default=None, help="default: mesh vertex count")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--freeze-existing", action="store_true")
    p.add_argument("--out", required=True)

    return parser


def _providers_from_spec(spec: assets_io.GuidanceSpec) -> ProviderSet:
    if spec.mode == "photometric":
        if spec.target_views_dir is None:
            raise assets_io.ManifestError("guidance: photometric mode needs target_views_dir")
        targets = assets_io.load_target_views(spec.target_views_dir)
        weight_fn = lambda t, _w=spec.weight: _w  # noqa: E731
        return ProviderSet.single(PhotometricProvider(targets, weight_fn=weight_fn))
    return ProviderSet.single(RemoteProvider(spec.host, spec.port))


def _parse_guidance_override(text: str, manifest_spec: assets_io.GuidanceSpec) -> assets_io.GuidanceSpec:
    if text == "photometric":
        return assets_io.GuidanceSpec(
            mode="photometric", target_views_dir=manifest_spec.target_views_dir,
            weight=manifest_spec.weight,
        )
    if text.startswith("remote:"):
        _, _, rest = text.partition(":")
        host, sep, port = rest.rpartition(":")
        if not sep or not host:
            raise assets_io.ManifestError(
                f"--guidance: expected remote:HOST:PORT, got {text!r}"
            )
        return assets_io.GuidanceSpec(mode="remote", host=host, port=int(port))
    raise assets_io.ManifestError(
        f"--guidance: expected photometric or remote:HOST:PORT, got {text!r}"
    )


def _cmd_init(args) -> int:
    manifest = assets_io.load_manifest(args.manifest)
    seed = manifest.optim.seed if args.seed is None else args.seed
    scene = assets_io.build_scene_from_manifest(
        manifest, rng=np.random.default_rng(seed), scalar_nn=args.scalar_nn
    )
    assets_io.export_gaussians_ply(scene, args.out)
    print(f"wrote {scene.gaussians.count} Gaussians across {len(scene.entities)} entities to {args.out}")
    return 0


def _cmd_optimize(args) -> int:
    manifest = assets_io.load_manifest(args.manifest)
    config = manifest.optim
    if args.seed is not None:
        config = replace(config, seed=args.seed)
    if args.ablate == "no_do":
        config = replace(config, no_do=True)
    elif args.ablate == "no_vao":
        config = replace(config, no_vao=True)
    elif args.ablate == "random_init":
        config = replace(config, random_init=True)
    if args.mask_by_containment:
        config = replace(config, mask_by_containment=True)

    if config.random_init:
        # the ablation discards the mesh-derived scene and starts from noise
        scene = assets_io.build_scene_from_manifest(
            manifest, rng=np.random.default_rng(config.seed), random_init=True
        )
    else:
        scene = assets_io.load_gaussians_ply(args.scene)
        scene.composition_prompt = manifest.composition_prompt

    spec = manifest.guidance
    if args.guidance is not None:
        spec = _parse_guidance_override(args.guidance, manifest.guidance)
    providers = _providers_from_spec(spec)

    try:
        report = run_dynamic_optimization(scene, config, providers)
    except OptimizationAborted as exc:
        exc.partial_report.write_csv(args.report)
        print(f"optimize aborted: {exc}", file=sys.stderr)
        return 1
    finally:
        providers.close()

    assets_io.export_gaussians_ply(scene, args.out)
    report.write_csv(args.report)
    print(
        f"optimized {config.total_iters} iterations; final count "
        f"{scene.gaussians.count}; report at {args.report}"
    )
    return 0


def _cmd_render(args) -> int:
    scene = assets_io.load_gaussians_ply(args.scene)
    kind, _, count = args.views.partition(":")
    if kind != "turntable" or not count.isdigit() or int(count) < 1:
        print(f"render: unsupported --views {args.views!r} (expected turntable:N)", file=sys.stderr)
        return 1
    subset = None
    if args.entity is not None:
        subset = entity_indices(scene, args.entity)
    intr = Intrinsics(fov_y=args.fov_y, width=args.width, height=args.height)
    os.makedirs(args.outdir, exist_ok=True)
    for k, pose in enumerate(turntable_poses(int(count))):
        img = render(scene, pose, intr, subset=subset)
        assets_io.write_image(img, os.path.join(args.outdir, f"frame_{k:03d}.{args.format}"))
    print(f"wrote {count} frames to {args.outdir}")
    return 0


def _cmd_edit_add(args) -> int:
    scene = assets_io.load_gaussians_ply(args.scene)
    entity_id = args.entity_id
    if entity_id is None:
        entity_id = max(scene.entity_ids, default=0) + 1
    mesh = assets_io.load_mesh(args.mesh, entity_id=entity_id, prompt=args.prompt)
    edited = add_entity(
        scene,
        mesh,
        freeze_existing=args.freeze_existing,
        n=args.points,
        rng=np.random.default_rng(args.seed),
    )
    assets_io.export_gaussians_ply(edited, args.out)
    frozen = sum(1 for m in edited.entities if m.frozen)
    print(
        f"added entity {entity_id} ({mesh.vertex_count} vertices); "
        f"{frozen} frozen entities; wrote {args.out}"
    )
    return 0


_COMMANDS = {
    "init": _cmd_init,
    "optimize": _cmd_optimize,
    "render": _cmd_render,
    "edit-add": _cmd_edit_add,
}


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except (OSError, ValueError, KeyError, GuidanceError) as exc:
        print(f"compsplat {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

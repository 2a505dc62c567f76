"""Compare the compiled kernels against the pure NumPy fallback.

Usage: python3 benchmarks/benchmark_backends.py [--views N] [--size PX]
Renders the same synthetic scene through both backends (forward reference,
forward tiled, backward) and prints a timing table plus the speedup.
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from compsplat.camera import Intrinsics, turntable_poses
from compsplat.rendering import (
    RenderMode,
    available_backends,
    compiled_available,
    render,
    render_backward,
    set_backend,
)
from compsplat.synthetic import ground_truth_scene


def time_pass(fn, repeats: int) -> float:
    best = float("inf")
    for _ in range(repeats):
        start = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - start)
    return best


def run_backend(name: str, scene, cameras, size: int, repeats: int) -> dict[str, float]:
    set_backend(name)
    out: dict[str, float] = {}

    def forward(mode):
        for pose, intr in cameras:
            render(scene, pose, intr, mode=mode)

    def backward():
        upstream = np.ones((size, size, 3), dtype=np.float64)
        for pose, intr in cameras:
            render_backward(scene, pose, intr, upstream)

    out["forward reference"] = time_pass(lambda: forward(RenderMode.REFERENCE), repeats)
    out["forward tiled"] = time_pass(lambda: forward(RenderMode.TILED), repeats)
    out["backward"] = time_pass(backward, repeats)
    return out


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--views", type=int, default=4)
    parser.add_argument("--size", type=int, default=128)
    parser.add_argument("--repeats", type=int, default=3)
    args = parser.parse_args()

    scene = ground_truth_scene()
    intr = Intrinsics(fov_y=40.0, width=args.size, height=args.size)
    cameras = [
        (pose, intr) for pose in turntable_poses(args.views, distance=2.2)
    ]
    print(f"scene: {scene.gaussians.count} gaussians, "
          f"{args.views} views at {args.size}x{args.size}, best of {args.repeats}")

    names = list(available_backends())
    if not compiled_available():
        print("note: compiled backend unavailable, timing the fallback only")

    results = {name: run_backend(name, scene, cameras, args.size, args.repeats) for name in names}
    set_backend("compiled" if compiled_available() else "python")

    width = max(len(k) for k in next(iter(results.values())))
    header = f"{'pass':<{width}}" + "".join(f"  {n:>12}" for n in results)
    both = "python" in results and "compiled" in results
    if both:
        header += f"  {'speedup':>9}"  # python time / compiled time
    print(header)
    for key in next(iter(results.values())):
        row = f"{key:<{width}}"
        for n in results:
            row += f"  {results[n][key] * 1e3:>10.1f}ms"
        if both and results["compiled"][key] > 0:
            row += f"  {results['python'][key] / results['compiled'][key]:>8.1f}x"
        print(row)


if __name__ == "__main__":
    main()

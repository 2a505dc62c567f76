"""Process-wide runtime knobs read from the environment."""

from __future__ import annotations

import os

import numpy as np


def default_dtype() -> np.dtype:
    """Training precision selected by COMPSPLAT_PRECISION=f32|f64 (default f32)."""
    name = os.environ.get("COMPSPLAT_PRECISION", "f32").strip().lower()
    if name in ("f32", "float32", "single"):
        return np.dtype(np.float32)
    if name in ("f64", "float64", "double"):
        return np.dtype(np.float64)
    raise ValueError(f"COMPSPLAT_PRECISION must be 'f32' or 'f64', got {name!r}")


def thread_count() -> int:
    """Render-worker cap from COMPSPLAT_THREADS (default: cpu count, capped at 8)."""
    raw = os.environ.get("COMPSPLAT_THREADS")
    if raw is None:
        return min(os.cpu_count() or 1, 8)
    n = int(raw)
    if n < 1:
        raise ValueError("COMPSPLAT_THREADS must be >= 1")
    return n

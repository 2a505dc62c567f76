"""Kernel backend selection.

The compiled extension is preferred when it imported cleanly; the pure-numpy
module is always available as a fallback and for A/B comparison. Both expose
the same five entry points (project, rasterize_reference, rasterize_tiled,
backward, chain stage) with matching semantics.
"""

from __future__ import annotations

from types import ModuleType

from . import _kernels_py

try:
    from . import _kernels  # type: ignore[attr-defined]
except ImportError:  # extension not built on this install
    _kernels = None

_active: ModuleType = _kernels if _kernels is not None else _kernels_py


def compiled_available() -> bool:
    return _kernels is not None


def active_backend() -> ModuleType:
    return _active


def active_backend_name() -> str:
    return "compiled" if getattr(_active, "COMPILED", False) else "python"


def available_backends() -> dict[str, ModuleType]:
    found: dict[str, ModuleType] = {"python": _kernels_py}
    if _kernels is not None:
        found["compiled"] = _kernels
    return found


def set_backend(name: str) -> ModuleType:
    """Switch the active backend by name ("python" or "compiled")."""
    global _active
    found = available_backends()
    if name not in found:
        raise ValueError(f"unknown backend {name!r}; available: {sorted(found)}")
    _active = found[name]
    return _active

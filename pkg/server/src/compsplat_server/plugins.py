"""Guidance plugins: each turns one request into a residual.

A plugin must be reentrant (it may be called from several connection threads
at once) and raise PluginError for per-request failures; the server reports
those as ERROR frames without dropping the connection.
"""

from __future__ import annotations

from typing import Protocol

import numpy as np

from .framing import Request
from .targets import StoredView, rotation_angle_deg


class PluginError(RuntimeError):
    """Request could not be answered; connection should stay open."""


class ProviderPlugin(Protocol):
    name: str

    def respond(self, request: Request) -> tuple[np.ndarray, float, float]:
        """Returns (residual, weight, cfg_scale) for one request."""
        ...


class PhotometricPlugin:
    """Deterministic oracle: residual = request image minus the stored view
    of the same prompt whose camera rotation is nearest the request's."""

    name = "photometric"

    def __init__(self, targets: dict[int, list[StoredView]], weight: float = 1.0):
        if not targets:
            raise ValueError("need at least one prompt with target views")
        self._targets = targets
        self._weight = float(weight)

    def respond(self, request: Request) -> tuple[np.ndarray, float, float]:
        views = self._targets.get(int(request.prompt_id))
        if not views:
            raise PluginError(f"no target views for prompt {request.prompt_id}")
        req_rot = np.asarray(request.view_matrix, dtype=np.float64)[:3, :3]
        best = min(views, key=lambda v: rotation_angle_deg(req_rot, v.rotation()))
        if best.image.shape != request.image.shape:
            raise PluginError(
                f"target shape {best.image.shape} does not match request {request.image.shape}"
            )
        residual = request.image.astype(np.float64) - best.image
        return residual, self._weight, 1.0


class DiffusionPlugin:
    """Mount point for a real denoiser-driven prior.

    Serving real guidance means loading model weights, noising the rendered
    view to the requested timestep, running conditional and unconditional
    denoising passes, and returning their amplified difference as the
    residual. None of that ships here; the class documents the seam and
    refuses requests until an implementation is dropped in.
    """

    name = "diffusion"

    def __init__(self) -> None:
        self.configured = False

    def respond(self, request: Request) -> tuple[np.ndarray, float, float]:
        raise PluginError(
            "diffusion guidance is not configured: this build ships no model "
            "weights; subclass DiffusionPlugin and implement respond()"
        )


def build_plugin(name: str, targets_dir: str | None, weight: float = 1.0) -> ProviderPlugin:
    if name == "photometric":
        if targets_dir is None:
            raise ValueError("photometric plugin needs --targets DIR")
        from .targets import load_target_views

        return PhotometricPlugin(load_target_views(targets_dir), weight=weight)
    if name == "diffusion":
        return DiffusionPlugin()
    raise ValueError(f"unknown plugin {name!r} (available: photometric, diffusion)")

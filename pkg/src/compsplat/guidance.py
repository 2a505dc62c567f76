"""Guidance providers: the residual source for score-distillation updates.

A provider receives a rendered view plus conditioning metadata and returns a
weighted residual image. Two implementations ship here: a deterministic
photometric oracle (residual = rendered - target, so the assembled update is
the exact gradient of a multi-view image loss) and a client for a remote
provider speaking the binary frame protocol, where a real diffusion prior
can sit on the other end.
"""

from __future__ import annotations

import socket
from dataclasses import dataclass
from typing import Callable, Protocol, Sequence, runtime_checkable

import numpy as np

from . import wire
from .camera import CameraPose, Intrinsics
from .rendering import GradientBuffer, RenderedImage, render_backward
from .scene import GaussianSet, Scene

DEFAULT_CFG_SCALE = 50.0

COMPOSITION_PROMPT_ID = 0


class GuidanceError(Exception):
    """Base class for provider failures."""


class GuidanceTransportError(GuidanceError):
    """Connection-level failure talking to a remote provider."""


class GuidanceProtocolError(GuidanceError):
    """The remote peer violated the frame protocol or the handshake."""


class GuidanceRemoteError(GuidanceError):
    """The remote provider answered with an ERROR frame."""

    def __init__(self, code: int, message: str):
        super().__init__(f"remote guidance error {code}: {message}")
        self.code = code
        self.message = message


@dataclass(frozen=True)
class TimestepSchedule:
    """Two-phase uniform timestep sampling law."""

    phase1_range: tuple[float, float] = (0.02, 0.55)
    phase2_range: tuple[float, float] = (0.02, 0.15)
    phase_switch_iter: int = 1000

    def __post_init__(self):
        for name in ("phase1_range", "phase2_range"):
            lo, hi = getattr(self, name)
            if not (0.0 < lo <= hi < 1.0):
                raise ValueError(f"{name} must satisfy 0 < lo <= hi < 1, got ({lo}, {hi})")

    def range_for(self, iteration: int) -> tuple[float, float]:
        return self.phase1_range if iteration < self.phase_switch_iter else self.phase2_range


def sample_timestep(iteration: int, sched: TimestepSchedule, rng: np.random.Generator) -> float:
    if iteration < 0:
        raise ValueError(f"iteration must be >= 0, got {iteration}")
    lo, hi = sched.range_for(iteration)
    return float(rng.uniform(lo, hi))


@dataclass
class GuidanceRequest:
    iteration: int
    timestep: float
    prompt_id: int
    view_matrix: np.ndarray  # (4, 4) world-to-view, row-major
    fov_y_deg: float
    image: np.ndarray  # (H, W, 3) rendered RGB

    @classmethod
    def from_render(
        cls,
        iteration: int,
        timestep: float,
        prompt_id: int,
        pose: CameraPose,
        intrinsics: Intrinsics,
        rendered: RenderedImage,
    ) -> "GuidanceRequest":
        return cls(
            iteration=iteration,
            timestep=timestep,
            prompt_id=prompt_id,
            view_matrix=pose.world_to_view(),
            fov_y_deg=float(intrinsics.fov_y),
            image=rendered.rgb,
        )


@dataclass
class GuidanceResponse:
    residual: np.ndarray  # (H, W, 3)
    weight: float = 1.0
    cfg_scale: float = DEFAULT_CFG_SCALE

    def __post_init__(self):
        if self.weight < 0:
            raise ValueError(f"weight must be >= 0, got {self.weight}")


@runtime_checkable
class GuidanceProvider(Protocol):
    """Synchronous residual source; one outstanding request at a time."""

    def respond(self, request: GuidanceRequest) -> GuidanceResponse: ...

    def cameras_for(self, prompt_id: int) -> list["TargetView"] | None: ...

    def close(self) -> None: ...


def photometric_residual(
    rendered: RenderedImage,
    target: RenderedImage,
    weight: float = 1.0,
) -> GuidanceResponse:
    """Deterministic guidance surrogate: residual = rendered - target."""
    if rendered.rgb.shape != target.rgb.shape:
        raise ValueError(
            f"rendered shape {rendered.rgb.shape} does not match target {target.rgb.shape}"
        )
    residual = np.asarray(rendered.rgb, dtype=np.float64) - np.asarray(target.rgb, dtype=np.float64)
    return GuidanceResponse(residual=residual, weight=weight, cfg_scale=1.0)


def assemble_guidance_gradient(
    resp: GuidanceResponse,
    scene: Scene | GaussianSet,
    pose: CameraPose,
    intrinsics: Intrinsics,
    subset: np.ndarray | None = None,
    **render_kwargs,
) -> GradientBuffer:
    """Push a weighted residual through the renderer's backward pass.

    The residual is treated as the pixel-space gradient; the provider already
    applied any CFG amplification, so only `weight` scales the result here.
    """
    grads = render_backward(scene, pose, intrinsics, resp.residual, subset=subset, **render_kwargs)
    if resp.weight != 1.0:
        grads.scale_(float(resp.weight))
    return grads


@dataclass(frozen=True)
class TargetView:
    """One stored supervision view: camera plus the expected image."""

    pose: CameraPose
    intrinsics: Intrinsics
    image: np.ndarray  # (H, W, 3)


def _rotation_angle_deg(view_a: np.ndarray, view_b: np.ndarray) -> float:
    """Geodesic angle between the rotation parts of two view matrices."""
    r = view_a[:3, :3] @ view_b[:3, :3].T
    cos = (float(np.trace(r)) - 1.0) / 2.0
    return float(np.degrees(np.arccos(np.clip(cos, -1.0, 1.0))))


class PhotometricProvider:
    """In-process oracle backed by stored target views.

    Requests are matched to the stored view of the same prompt with the
    smallest camera-rotation difference; supervision therefore only makes
    sense when training cameras are drawn from `cameras_for`.
    """

    def __init__(
        self,
        targets: dict[int, Sequence[TargetView]],
        weight_fn: Callable[[float], float] | None = None,
    ):
        if not targets:
            raise ValueError("need at least one prompt with target views")
        self._targets = {int(k): list(v) for k, v in targets.items()}
        for pid, views in self._targets.items():
            if not views:
                raise ValueError(f"prompt {pid} has no target views")
        self._weight_fn = weight_fn
        self.call_log: list[int] = []  # prompt_id per request, for ablation checks

    def prompt_ids(self) -> list[int]:
        return sorted(self._targets)

    def cameras_for(self, prompt_id: int) -> list[TargetView] | None:
        views = self._targets.get(int(prompt_id))
        return list(views) if views is not None else None

    def respond(self, request: GuidanceRequest) -> GuidanceResponse:
        views = self._targets.get(int(request.prompt_id))
        if views is None:
            raise GuidanceError(f"no target views for prompt {request.prompt_id}")
        self.call_log.append(int(request.prompt_id))
        best = min(
            views,
            key=lambda v: _rotation_angle_deg(request.view_matrix, v.pose.world_to_view()),
        )
        if best.image.shape != request.image.shape:
            raise GuidanceError(
                f"target shape {best.image.shape} does not match render {request.image.shape}"
            )
        weight = 1.0 if self._weight_fn is None else float(self._weight_fn(request.timestep))
        residual = np.asarray(request.image, dtype=np.float64) - np.asarray(best.image, dtype=np.float64)
        return GuidanceResponse(residual=residual, weight=weight, cfg_scale=1.0)

    def close(self) -> None:
        pass


class RemoteProvider:
    """Client side of the frame protocol; blocking, one request in flight."""

    def __init__(self, host: str, port: int, timeout: float = 30.0):
        self._address = f"{host}:{port}"
        try:
            self._sock = socket.create_connection((host, port), timeout=timeout)
        except OSError as exc:
            raise GuidanceTransportError(f"cannot connect to {self._address}: {exc}") from exc
        try:
            wire.send_frame(self._sock, wire.MessageType.HELLO, wire.pack_hello())
            kind, payload = wire.recv_frame(self._sock)
        except (OSError, wire.FrameError) as exc:
            self._sock.close()
            raise GuidanceTransportError(f"handshake with {self._address} failed: {exc}") from exc
        if kind is wire.MessageType.HELLO_ERR:
            server_version = wire.unpack_hello_reply(payload)
            self._sock.close()
            raise GuidanceProtocolError(
                f"server at {self._address} speaks protocol version {server_version}, "
                f"client speaks {wire.PROTOCOL_VERSION}"
            )
        if kind is not wire.MessageType.HELLO_OK:
            self._sock.close()
            raise GuidanceProtocolError(f"expected HELLO_OK, got {kind.name}")

    def cameras_for(self, prompt_id: int) -> list[TargetView] | None:
        return None  # remote priors are view-agnostic; cameras are sampled

    def respond(self, request: GuidanceRequest) -> GuidanceResponse:
        payload = wire.pack_request(
            request.iteration, request.timestep, request.prompt_id,
            request.view_matrix, request.fov_y_deg, request.image,
        )
        try:
            wire.send_frame(self._sock, wire.MessageType.REQUEST, payload)
            kind, body = wire.recv_frame(self._sock)
        except wire.FrameError as exc:
            self.close()
            raise GuidanceProtocolError(f"bad frame from {self._address}: {exc}") from exc
        except OSError as exc:
            self.close()
            raise GuidanceTransportError(f"transport failure with {self._address}: {exc}") from exc
        if kind is wire.MessageType.ERROR:
            code, message = wire.unpack_error(body)
            raise GuidanceRemoteError(code, message)
        if kind is not wire.MessageType.RESPONSE:
            self.close()
            raise GuidanceProtocolError(f"expected RESPONSE, got {kind.name}")
        try:
            frame = wire.unpack_response(body)
        except wire.FrameError as exc:
            self.close()
            raise GuidanceProtocolError(f"malformed RESPONSE from {self._address}: {exc}") from exc
        if frame.residual.shape != request.image.shape:
            self.close()
            raise GuidanceProtocolError(
                f"residual shape {frame.residual.shape} does not match request "
                f"image {request.image.shape}"
            )
        return GuidanceResponse(
            residual=frame.residual.astype(np.float64),
            weight=float(frame.weight),
            cfg_scale=float(frame.cfg_scale),
        )

    def close(self) -> None:
        try:
            self._sock.close()
        except OSError:
            pass


@dataclass
class ProviderSet:
    """The two guidance slots of the composition stage.

    Composition-level steps sum gradients assembled from both slots; entity
    level steps use only the 3D slot. Sharing one provider object between
    the slots is allowed.
    """

    provider_2d: GuidanceProvider
    provider_3d: GuidanceProvider

    @classmethod
    def single(cls, provider: GuidanceProvider) -> "ProviderSet":
        return cls(provider_2d=provider, provider_3d=provider)

    def close(self) -> None:
        self.provider_2d.close()
        if self.provider_3d is not self.provider_2d:
            self.provider_3d.close()

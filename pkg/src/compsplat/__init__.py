"""Compositional 3D Gaussian splatting.

Scenes are collections of entity-tagged anisotropic Gaussians. The package
covers the full loop: per-entity initialization from colored meshes,
differentiable splatting (compiled kernel with a pure-NumPy fallback),
dynamic composition/entity-level optimization with volume-adaptive zooming,
guidance over a small binary wire protocol, and PLY/PPM asset handling.
"""

from .camera import (
    CameraPose,
    CameraRanges,
    Intrinsics,
    sample_training_camera,
    turntable_poses,
)
from .guidance import (
    COMPOSITION_PROMPT_ID,
    DEFAULT_CFG_SCALE,
    GuidanceError,
    GuidanceProtocolError,
    GuidanceRemoteError,
    GuidanceRequest,
    GuidanceResponse,
    GuidanceTransportError,
    PhotometricProvider,
    ProviderSet,
    RemoteProvider,
    TargetView,
    TimestepSchedule,
    assemble_guidance_gradient,
    photometric_residual,
    sample_timestep,
)
from .initializer import (
    EntityMesh,
    add_entity,
    init_entity_from_mesh,
    init_scene,
    nearest_neighbor_distance,
    random_init_in_bbox,
)
from .optimizer import (
    LrSchedule,
    OptimConfig,
    OptimReport,
    OptimizationAborted,
    ZoomState,
    apply_update,
    densify_and_prune,
    mask_frozen,
    mask_gradients,
    run_dynamic_optimization,
    select_level,
    zoom_back,
    zoom_in,
)
from .rendering import (
    DEFAULT_BACKGROUND,
    GradientBuffer,
    RenderMode,
    RenderedImage,
    active_backend_name,
    available_backends,
    compiled_available,
    render,
    render_backward,
    set_backend,
)
from .scene import (
    Aabb3,
    EntityMeta,
    GaussianSet,
    Scene,
    compute_entity_bbox,
    entity_indices,
    entity_slice,
    frozen_row_mask,
    refresh_entity_bboxes,
    validate_scene,
)

__version__ = "0.1.0"

__all__ = [
    "Aabb3",
    "CameraPose",
    "CameraRanges",
    "COMPOSITION_PROMPT_ID",
    "DEFAULT_BACKGROUND",
    "DEFAULT_CFG_SCALE",
    "EntityMesh",
    "EntityMeta",
    "GaussianSet",
    "GradientBuffer",
    "GuidanceError",
    "GuidanceProtocolError",
    "GuidanceRemoteError",
    "GuidanceRequest",
    "GuidanceResponse",
    "GuidanceTransportError",
    "Intrinsics",
    "LrSchedule",
    "OptimConfig",
    "OptimReport",
    "OptimizationAborted",
    "PhotometricProvider",
    "ProviderSet",
    "RemoteProvider",
    "RenderMode",
    "RenderedImage",
    "Scene",
    "TargetView",
    "TimestepSchedule",
    "ZoomState",
    "active_backend_name",
    "add_entity",
    "apply_update",
    "assemble_guidance_gradient",
    "available_backends",
    "compiled_available",
    "compute_entity_bbox",
    "densify_and_prune",
    "entity_indices",
    "entity_slice",
    "frozen_row_mask",
    "init_entity_from_mesh",
    "init_scene",
    "mask_frozen",
    "mask_gradients",
    "nearest_neighbor_distance",
    "photometric_residual",
    "random_init_in_bbox",
    "refresh_entity_bboxes",
    "render",
    "render_backward",
    "run_dynamic_optimization",
    "sample_timestep",
    "sample_training_camera",
    "select_level",
    "set_backend",
    "turntable_poses",
    "validate_scene",
    "zoom_back",
    "zoom_in",
]

"""Standalone guidance server speaking the splat optimizer's wire protocol."""

from .framing import (
    MAGIC,
    MAX_IMAGE_SIDE,
    MAX_PAYLOAD,
    PROTOCOL_VERSION,
    BadFrame,
    MsgType,
    Request,
)
from .plugins import (
    DiffusionPlugin,
    PhotometricPlugin,
    PluginError,
    ProviderPlugin,
    build_plugin,
)
from .server import GuidanceServer, serve
from .targets import StoredView, load_target_views

__version__ = "0.1.0"

__all__ = [
    "MAGIC",
    "MAX_IMAGE_SIDE",
    "MAX_PAYLOAD",
    "PROTOCOL_VERSION",
    "BadFrame",
    "DiffusionPlugin",
    "GuidanceServer",
    "MsgType",
    "PhotometricPlugin",
    "PluginError",
    "ProviderPlugin",
    "Request",
    "StoredView",
    "build_plugin",
    "load_target_views",
    "serve",
    "__version__",
]

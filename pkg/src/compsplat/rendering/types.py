"""Value types shared by the forward and backward rendering paths."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np


class RenderMode(enum.Enum):
    """REFERENCE is the naive exact rasterizer; TILED is the fast path."""

    REFERENCE = "reference"
    TILED = "tiled"


CULLED = None  # sentinel result of ewa_project for off-frustum Gaussians


@dataclass
class Splat2D:
    """One Gaussian after projection to the image plane."""

    mean2d: np.ndarray  # (2,) pixels
    cov2d: np.ndarray  # (2, 2) symmetric, pixel^2, low-pass already applied
    depth: float  # view-space z of the center
    color: np.ndarray = field(default_factory=lambda: np.zeros(3))
    opacity: float = 1.0
    source_index: int = -1

    def __post_init__(self) -> None:
        self.mean2d = np.asarray(self.mean2d, dtype=np.float64).reshape(2)
        self.cov2d = np.asarray(self.cov2d, dtype=np.float64).reshape(2, 2)
        self.color = np.asarray(self.color, dtype=np.float64).reshape(3)


@dataclass
class RenderedImage:
    """Forward output: RGB in [0, 1] plus per-pixel final transmittance."""

    rgb: np.ndarray  # (H, W, 3)
    transmittance: np.ndarray  # (H, W)

    @property
    def height(self) -> int:
        return self.rgb.shape[0]

    @property
    def width(self) -> int:
        return self.rgb.shape[1]


@dataclass
class GradientBuffer:
    """Per-parameter gradients laid out exactly like GaussianSet.

    Culled Gaussians keep all-zero rows; every entry is finite by contract.
    """

    d_positions: np.ndarray
    d_rotations: np.ndarray
    d_log_scales: np.ndarray
    d_opacities: np.ndarray
    d_colors: np.ndarray

    ARRAY_FIELDS = ("d_positions", "d_rotations", "d_log_scales", "d_opacities", "d_colors")

    @classmethod
    def zeros(cls, count: int, dtype: np.dtype = np.float64) -> "GradientBuffer":
        return cls(
            d_positions=np.zeros((count, 3), dtype=dtype),
            d_rotations=np.zeros((count, 4), dtype=dtype),
            d_log_scales=np.zeros((count, 3), dtype=dtype),
            d_opacities=np.zeros(count, dtype=dtype),
            d_colors=np.zeros((count, 3), dtype=dtype),
        )

    @property
    def count(self) -> int:
        return self.d_positions.shape[0]

    def copy(self) -> "GradientBuffer":
        return GradientBuffer(*(getattr(self, f).copy() for f in self.ARRAY_FIELDS))

    def add_(self, other: "GradientBuffer") -> "GradientBuffer":
        for f in self.ARRAY_FIELDS:
            getattr(self, f)[...] += getattr(other, f)
        return self

    def scale_(self, factor: float) -> "GradientBuffer":
        for f in self.ARRAY_FIELDS:
            getattr(self, f)[...] *= factor
        return self

    def zero_rows_(self, rows: np.ndarray) -> "GradientBuffer":
        """Set every parameter gradient of the selected rows to exactly 0."""
        for f in self.ARRAY_FIELDS:
            getattr(self, f)[rows] = 0
        return self

    def nonzero_rows(self) -> np.ndarray:
        """Boolean mask of rows carrying any nonzero gradient entry."""
        mask = np.zeros(self.count, dtype=bool)
        for f in self.ARRAY_FIELDS:
            arr = getattr(self, f)
            mask |= np.any(arr.reshape(self.count, -1) != 0, axis=1)
        return mask

    def all_finite(self) -> bool:
        return all(bool(np.all(np.isfinite(getattr(self, f)))) for f in self.ARRAY_FIELDS)

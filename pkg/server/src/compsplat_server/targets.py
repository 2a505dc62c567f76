"""Stored target views: views.json index plus one PPM image per view."""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass

import numpy as np


@dataclass
class StoredView:
    prompt_id: int
    eye: tuple[float, float, float]
    look_at: tuple[float, float, float]
    up: tuple[float, float, float]
    fov_y: float
    image: np.ndarray  # (H, W, 3) float64 in [0, 1]

    def rotation(self) -> np.ndarray:
        """World-to-view rotation for the look-at camera (y down, z forward)."""
        eye = np.asarray(self.eye, dtype=np.float64)
        target = np.asarray(self.look_at, dtype=np.float64)
        up = np.asarray(self.up, dtype=np.float64)
        forward = target - eye
        forward = forward / np.linalg.norm(forward)
        right = np.cross(forward, up)
        norm = np.linalg.norm(right)
        if norm < 1e-12:
            raise ValueError("up vector is parallel to the viewing direction")
        right = right / norm
        true_up = np.cross(right, forward)
        return np.stack([right, -true_up, forward], axis=0)


def read_ppm(path: str) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    if not data.startswith(b"P6"):
        raise ValueError(f"{path}: not a P6 PPM")
    fields: list[bytes] = []
    pos = 2
    while len(fields) < 3:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        fields.append(data[start:pos])
    width, height, maxval = (int(f) for f in fields)
    if maxval != 255:
        raise ValueError(f"{path}: only maxval 255 is supported, got {maxval}")
    pos += 1
    pixels = np.frombuffer(data, dtype=np.uint8, count=width * height * 3, offset=pos)
    return pixels.reshape(height, width, 3).astype(np.float64) / 255.0


def load_target_views(dir_path: str) -> dict[int, list[StoredView]]:
    index_path = os.path.join(dir_path, "views.json")
    with open(index_path, "r", encoding="utf-8") as fh:
        index = json.load(fh)["views"]
    out: dict[int, list[StoredView]] = {}
    for item in index:
        view = StoredView(
            prompt_id=int(item["prompt_id"]),
            eye=tuple(item["eye"]),
            look_at=tuple(item.get("look_at", (0.0, 0.0, 0.0))),
            up=tuple(item.get("up", (0.0, 1.0, 0.0))),
            fov_y=float(item["fov_y"]),
            image=read_ppm(os.path.join(dir_path, item["file"])),
        )
        out.setdefault(view.prompt_id, []).append(view)
    if not out:
        raise ValueError(f"{index_path}: no views listed")
    return out


def rotation_angle_deg(rot_a: np.ndarray, rot_b: np.ndarray) -> float:
    """Geodesic angle between two rotation matrices."""
    r = np.asarray(rot_a, dtype=np.float64) @ np.asarray(rot_b, dtype=np.float64).T
    cos = (float(np.trace(r)) - 1.0) / 2.0
    return math.degrees(math.acos(max(-1.0, min(1.0, cos))))

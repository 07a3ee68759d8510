"""Pinhole camera model.

Camera frame: +z forward (viewing direction), +x right, +y down.  Image
origin is the top-left corner, u grows rightward, v downward, and pixel
centres sit at integer + 0.5.  No lens distortion.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import BehindCameraError
from .se3 import RigidTransform

NEAR_PLANE = 1e-4  # metres


@dataclass(frozen=True)
class PinholeCamera:
    """Intrinsics in pixels plus the camera pose in the world frame (T_w_c)."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    extrinsics: RigidTransform

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point outside the image")

    def intrinsic_matrix(self) -> np.ndarray:
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
        )


def project(cam: PinholeCamera, p_cam) -> tuple[float, float, float]:
    """Project a camera-frame point to continuous pixel coords and depth."""
    x, y, z = np.asarray(p_cam, dtype=float).reshape(3)
    if z <= NEAR_PLANE:
        raise BehindCameraError(f"point depth {z} at or behind near plane")
    return cam.fx * x / z + cam.cx, cam.fy * y / z + cam.cy, z


def back_project(cam: PinholeCamera, u: float, v: float, depth: float) -> np.ndarray:
    """Camera-frame point whose projection is (u, v) at the given depth."""
    if depth <= 0:
        raise ValueError(f"depth must be positive, got {depth}")
    return np.array(
        [(u - cam.cx) * depth / cam.fx, (v - cam.cy) * depth / cam.fy, depth]
    )


def back_project_many(cam: PinholeCamera, uv: np.ndarray, depth: np.ndarray) -> np.ndarray:
    """Vectorized back_project for an (N, 2) pixel array and (N,) depths."""
    uv = np.asarray(uv, dtype=float)
    depth = np.asarray(depth, dtype=float)
    x = (uv[:, 0] - cam.cx) * depth / cam.fx
    y = (uv[:, 1] - cam.cy) * depth / cam.fy
    return np.column_stack([x, y, depth])

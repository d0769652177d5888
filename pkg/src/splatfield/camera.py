"""Pinhole cameras with OpenCV axes (x right, y down, z forward).

Pixel (row i, col j) samples the image plane at (x=j, y=i); the projection
of a camera-space point (X, Y, Z) is u = fx*X/Z + cx, v = fy*Y/Z + cy.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class CameraView:
    """Intrinsics, rigid world-to-camera pose and optional ground-truth image."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    r_w2c: np.ndarray
    t_w2c: np.ndarray
    image: np.ndarray | None = None
    split: str = "train"

    def __post_init__(self):
        self.r_w2c = np.asarray(self.r_w2c, dtype=np.float64).reshape(3, 3)
        self.t_w2c = np.asarray(self.t_w2c, dtype=np.float64).reshape(3)
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError(f"focal lengths must be positive, got {self.fx}, {self.fy}")
        if not np.allclose(self.r_w2c @ self.r_w2c.T, np.eye(3), atol=1e-10):
            raise ValueError("world-to-camera rotation is not orthonormal")

    @property
    def position(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.r_w2c.T @ self.t_w2c

    def world_to_camera(self, p: np.ndarray) -> np.ndarray:
        p = np.asarray(p, dtype=np.float64)
        return p @ self.r_w2c.T + self.t_w2c

    def ray_directions(self) -> np.ndarray:
        """Unit world-space ray direction per pixel, shape (H, W, 3)."""
        js, is_ = np.meshgrid(np.arange(self.width), np.arange(self.height))
        d = np.stack([(js - self.cx) / self.fx, (is_ - self.cy) / self.fy,
                      np.ones_like(js, dtype=np.float64)], axis=-1)
        d = d @ self.r_w2c  # rows of r_w2c are camera axes in world coords
        return d / np.linalg.norm(d, axis=-1, keepdims=True)


def look_at(eye, target, up=(0.0, 0.0, 1.0)):
    """World-to-camera rotation and translation for a camera at `eye`
    looking toward `target`; returns (r_w2c, t_w2c)."""
    eye = np.asarray(eye, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    up = np.asarray(up, dtype=np.float64)
    forward = target - eye
    forward = forward / np.linalg.norm(forward)
    if abs(forward @ up) > 0.999:  # looking along the up axis
        up = np.array([1.0, 0.0, 0.0])
    right = np.cross(forward, up)
    right = right / np.linalg.norm(right)
    down = np.cross(forward, right)
    r_c2w = np.stack([right, down, forward], axis=1)
    r_w2c = r_c2w.T
    return r_w2c, -r_w2c @ eye


def make_camera(eye, target, width: int, height: int, focal: float,
                image=None, split: str = "train") -> CameraView:
    r, t = look_at(eye, target)
    return CameraView(fx=focal, fy=focal, cx=(width - 1) / 2.0,
                      cy=(height - 1) / 2.0, width=width, height=height,
                      r_w2c=r, t_w2c=t, image=image, split=split)

"""Pinhole camera with a world-to-camera rigid pose."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class CameraError(ValueError):
    pass


@dataclass
class Camera:
    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float
    # world -> camera: x_cam = R @ x_world + t
    R: np.ndarray = field(default_factory=lambda: np.eye(3))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))
    name: str = ""

    def __post_init__(self):
        self.R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        self.t = np.asarray(self.t, dtype=np.float64).reshape(3)
        self.validate()

    def validate(self):
        if self.width <= 0 or self.height <= 0:
            raise CameraError(f"camera {self.name!r}: non-positive image size {self.width}x{self.height}")
        if not (self.fx > 0 and self.fy > 0):
            raise CameraError(f"camera {self.name!r}: focal lengths must be positive")
        if not np.all(np.isfinite(self.R)) or not np.all(np.isfinite(self.t)):
            raise CameraError(f"camera {self.name!r}: non-finite pose")
        if np.abs(self.R @ self.R.T - np.eye(3)).max() > 1e-9 or np.linalg.det(self.R) < 0:
            raise CameraError(f"camera {self.name!r}: pose rotation is not orthonormal")

    @property
    def center(self) -> np.ndarray:
        return -self.R.T @ self.t

    @property
    def shape(self) -> tuple[int, int]:
        return self.height, self.width

    def scaled(self, factor: float) -> "Camera":
        w = max(1, int(round(self.width * factor)))
        h = max(1, int(round(self.height * factor)))
        sx, sy = w / self.width, h / self.height
        return Camera(w, h, self.fx * sx, self.fy * sy, self.cx * sx, self.cy * sy,
                      self.R.copy(), self.t.copy(), self.name)

    def pixel_dirs_camera(self) -> np.ndarray:
        """Unit ray directions through pixel centres, camera frame, (H, W, 3)."""
        u = (np.arange(self.width) + 0.5 - self.cx) / self.fx
        v = (np.arange(self.height) + 0.5 - self.cy) / self.fy
        d = np.stack(np.broadcast_arrays(u[None, :], v[:, None], np.ones((1, 1))), axis=-1)
        return d / np.linalg.norm(d, axis=-1, keepdims=True)

    def pixel_rays(self) -> tuple[np.ndarray, np.ndarray]:
        """Ray origin (3,) and unit world directions (H, W, 3)."""
        return self.center, self.pixel_dirs_camera() @ self.R

    def ray(self, x: float, y: float) -> tuple[np.ndarray, np.ndarray]:
        d = np.array([(x - self.cx) / self.fx, (y - self.cy) / self.fy, 1.0])
        d = self.R.T @ (d / np.linalg.norm(d))
        return self.center, d

    def world_to_camera(self, X: np.ndarray) -> np.ndarray:
        return np.asarray(X) @ self.R.T + self.t

    def project(self, X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Pixel coordinates (continuous, pixel-centre convention) and camera z."""
        Xc = self.world_to_camera(X)
        z = Xc[..., 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            uv = np.stack([self.fx * Xc[..., 0] / z + self.cx, self.fy * Xc[..., 1] / z + self.cy], axis=-1)
        return uv, z

    def unproject(self, uv: np.ndarray, z: np.ndarray) -> np.ndarray:
        """World points from pixel coordinates and camera-space z."""
        uv = np.asarray(uv, dtype=np.float64)
        z = np.asarray(z, dtype=np.float64)
        Xc = np.stack([(uv[..., 0] - self.cx) / self.fx * z, (uv[..., 1] - self.cy) / self.fy * z, z], axis=-1)
        return (Xc - self.t) @ self.R

    def frame_depth_to_z(self, depth: np.ndarray) -> np.ndarray:
        """Convert per-pixel ray distance to camera z."""
        return depth * self.pixel_dirs_camera()[..., 2]


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> tuple[np.ndarray, np.ndarray]:
    """World-to-camera (R, t) for a camera at `eye` looking at `target` (x right, y down, z forward)."""
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    fwd /= np.linalg.norm(fwd)
    right = np.cross(fwd, np.asarray(up, dtype=np.float64))
    if np.linalg.norm(right) < 1e-9:
        right = np.cross(fwd, np.array([0.0, 1.0, 0.0]))
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    R = np.stack([right, down, fwd])
    return R, -R @ eye

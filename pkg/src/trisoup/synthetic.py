"""Synthetic scenes with exact analytic geometry.

Surfaces are unions of planar rectangles with a smooth procedural texture.
Ground-truth images are rendered through the forward rasterizer from a fine
grid of sharp, opaque triangles (``gt="raster"``) or by direct ray casting
(``gt="analytic"``); depth is always analytic.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .camera import Camera, look_at
from .rasterizer import RasterSettings, render
from .sceneio.colmap import Dataset
from .sh import rgb_to_sh
from .soup import SparseSeed, TriangleSoup


@dataclass
class Rect:
    origin: np.ndarray   # one corner
    U: np.ndarray        # edge vectors; the rectangle is origin + a U + b V, a, b in [0, 1]
    V: np.ndarray

    def normal(self):
        n = np.cross(self.U, self.V)
        return n / np.linalg.norm(n)

    def sample(self, n, rng):
        ab = rng.random((n, 2))
        return self.origin + ab[:, :1] * self.U + ab[:, 1:] * self.V

    def area(self):
        return float(np.linalg.norm(np.cross(self.U, self.V)))


def texture(X: np.ndarray) -> np.ndarray:
    """Smooth low-frequency RGB pattern over world points (..., 3)."""
    x, y, z = X[..., 0], X[..., 1], X[..., 2]
    r = 0.5 + 0.3 * np.sin(1.9 * x + 0.5) * np.cos(1.3 * y - 0.2) + 0.1 * np.cos(2.1 * z)
    g = 0.5 + 0.3 * np.cos(1.4 * x - 1.1 * y + 0.3) + 0.1 * np.sin(1.7 * z + 0.4)
    b = 0.45 + 0.25 * np.sin(1.2 * y + 0.7) + 0.15 * np.cos(1.6 * x + 1.3 * z)
    return np.clip(np.stack([r, g, b], axis=-1), 0.0, 1.0)


@dataclass
class Scene:
    name: str
    rects: list
    cameras: list

    def raycast(self, cam: Camera):
        """Analytic ray distance (0 = miss), world hit points and hit rectangle id."""
        C, D = cam.pixel_rays()
        H, W = cam.height, cam.width
        best = np.full((H, W), np.inf)
        rid = np.full((H, W), -1, np.int64)
        for k, r in enumerate(self.rects):
            n = np.cross(r.U, r.V)
            den = D @ n
            with np.errstate(divide="ignore", invalid="ignore"):
                t = ((r.origin - C) @ n) / den
            P = C + t[..., None] * D
            rel = P - r.origin
            a = rel @ r.U / (r.U @ r.U)
            b = rel @ r.V / (r.V @ r.V)
            hit = np.isfinite(t) & (t > 0) & (a >= 0) & (a <= 1) & (b >= 0) & (b <= 1) & (t < best)
            best = np.where(hit, t, best)
            rid = np.where(hit, k, rid)
        depth = np.where(np.isfinite(best), best, 0.0)
        X = C + depth[..., None] * D
        return depth, X, rid

    def surface_points(self, n: int, seed: int = 0) -> np.ndarray:
        rng = np.random.default_rng(seed)
        areas = np.array([r.area() for r in self.rects])
        counts = rng.multinomial(n, areas / areas.sum())
        return np.concatenate([r.sample(c, rng) for r, c in zip(self.rects, counts)])

    def observed_points(self) -> np.ndarray:
        """Analytic surface sampled at every pixel hit of every camera."""
        pts = []
        for cam in self.cameras:
            d, X, rid = self.raycast(cam)
            pts.append(X[rid >= 0])
        return np.concatenate(pts)

    def grid_soup(self, cells_per_unit: float = 12.0, dilate: float = 0.03, sharpness: float = 20.0,
                  opacity: float = 1 - 1e-7) -> TriangleSoup:
        """Opaque, sharp, slightly dilated triangles tiling every rectangle."""
        V, cols = [], []
        for r in self.rects:
            nu = max(1, int(np.ceil(np.linalg.norm(r.U) * cells_per_unit)))
            nv = max(1, int(np.ceil(np.linalg.norm(r.V) * cells_per_unit)))
            a, b = np.meshgrid(np.arange(nu + 1) / nu, np.arange(nv + 1) / nv, indexing="ij")
            P = r.origin + a[..., None] * r.U + b[..., None] * r.V
            for i in range(nu):
                for j in range(nv):
                    V.append([P[i, j], P[i + 1, j], P[i + 1, j + 1]])
                    V.append([P[i, j], P[i + 1, j + 1], P[i, j + 1]])
        V = np.asarray(V)
        c = V.mean(axis=1, keepdims=True)
        inr = _inradius(V)
        Vd = c + (V - c) * (1.0 + dilate * 3.0)
        cols = texture(V)
        sh = rgb_to_sh(cols)[:, :, None, :]
        delta = dilate * inr * 3.0
        sigma = sharpness / np.maximum(delta, 1e-12)
        soup = TriangleSoup.from_vertices(Vd, sh, opacity, sigma)
        # keep vertex colours at the undilated positions' texture
        soup.sh[:, :, 0, :] = rgb_to_sh(_extrapolated_colors(V, Vd, cols))
        return soup


def _inradius(V):
    a = np.linalg.norm(V[:, 1] - V[:, 2], axis=-1)
    b = np.linalg.norm(V[:, 0] - V[:, 2], axis=-1)
    c = np.linalg.norm(V[:, 0] - V[:, 1], axis=-1)
    area = 0.5 * np.linalg.norm(np.cross(V[:, 1] - V[:, 0], V[:, 2] - V[:, 0]), axis=-1)
    return 2 * area / (a + b + c)


def _extrapolated_colors(V, Vd, cols):
    # the dilated vertex colours continue the linear interpolant of the original triangle
    c = cols.mean(axis=1, keepdims=True)
    k = np.linalg.norm(Vd[:, 0] - Vd.mean(axis=1), axis=-1) / np.linalg.norm(V[:, 0] - V.mean(axis=1), axis=-1)
    return c + (cols - c) * k[:, None, None]


def _cap_cameras(n, target, radius, max_tilt_deg, size, focal, seed, up=(0.0, 1.0, 0.0), axis=(0.0, 0.0, 1.0)):
    rng = np.random.default_rng(seed)
    axis = np.asarray(axis, float)
    axis = axis / np.linalg.norm(axis)
    e1 = np.cross(axis, [1.0, 0.0, 0.0] if abs(axis[0]) < 0.9 else [0.0, 1.0, 0.0])
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(axis, e1)
    cams = []
    golden = np.pi * (3 - np.sqrt(5))
    for i in range(n):
        # spiral over the cap for even coverage, plus a little seeded jitter
        frac = (i + 0.5) / n
        tilt = np.deg2rad(max_tilt_deg) * np.sqrt(frac)
        phi = i * golden + rng.uniform(-0.1, 0.1)
        d = np.cos(tilt) * axis + np.sin(tilt) * (np.cos(phi) * e1 + np.sin(phi) * e2)
        eye = np.asarray(target, float) + radius * d
        R, t = look_at(eye, target, up)
        cams.append(Camera(size, size, focal, focal, size / 2, size / 2, R, t, f"view_{i:03d}.png"))
    return cams


def textured_quad(n_views=20, size=128, seed=0, half=3.0) -> Scene:
    """Fronto-parallel square (z = 0) large enough to fill every view."""
    r = Rect(np.array([-half, -half, 0.0]), np.array([2 * half, 0, 0.0]), np.array([0, 2 * half, 0.0]))
    cams = _cap_cameras(n_views, [0, 0, 0], 3.0, 20.0, size, 1.2 * size, seed)
    return Scene("quad", [r], cams)


def two_plane(n_views=20, size=128, seed=0, half=3.0, slope=0.35) -> Scene:
    """Two rectangles meeting in a ridge along y (z = -slope |x|)."""
    left = Rect(np.array([-half, -half, -slope * half]), np.array([half, 0, slope * half]), np.array([0, 2 * half, 0.0]))
    right = Rect(np.array([0.0, -half, 0.0]), np.array([half, 0, -slope * half]), np.array([0, 2 * half, 0.0]))
    cams = _cap_cameras(n_views, [0, 0, 0], 3.0, 20.0, size, 1.2 * size, seed)
    return Scene("two_plane", [left, right], cams)


def cube(n_views=20, size=128, seed=0, half=0.5) -> Scene:
    o = -half
    L = 2 * half
    ex, ey, ez = np.eye(3) * L
    c = np.array([o, o, o])
    rects = [Rect(c, ey, ex), Rect(c + ez, ex, ey),           # z- / z+
             Rect(c, ex, ez), Rect(c + ey, ez, ex),           # y- / y+
             Rect(c, ez, ey), Rect(c + ex, ey, ez)]           # x- / x+
    rng = np.random.default_rng(seed)
    cams = []
    golden = np.pi * (3 - np.sqrt(5))
    for i in range(n_views):
        zc = 0.8 - 1.2 * (i + 0.5) / n_views
        ph = i * golden + rng.uniform(-0.1, 0.1)
        d = np.array([np.sqrt(1 - zc * zc) * np.cos(ph), np.sqrt(1 - zc * zc) * np.sin(ph), zc])
        R, t = look_at(3.0 * d, [0, 0, 0], (0, 0, 1))
        cams.append(Camera(size, size, 1.2 * size, 1.2 * size, size / 2, size / 2, R, t, f"view_{i:03d}.png"))
    return Scene("cube", rects, cams)


SCENES = {"quad": textured_quad, "two_plane": two_plane, "cube": cube}


def render_ground_truth(scene: Scene, gt: str = "raster"):
    """Images and analytic depths for every camera."""
    images, depths = [], []
    soup = scene.grid_soup() if gt == "raster" else None
    st = RasterSettings()
    for cam in scene.cameras:
        d, X, rid = scene.raycast(cam)
        if gt == "raster":
            img = np.clip(render(soup, cam, st).color, 0.0, 1.0)
        elif gt == "analytic":
            img = np.where((rid >= 0)[..., None], texture(X), 0.0)
        else:
            raise ValueError(f"unknown ground-truth mode {gt!r}")
        images.append(img)
        depths.append(d)
    return images, depths


def make_dataset(name: str = "quad", n_views: int = 20, size: int = 128, n_points: int = 500,
                 seed: int = 0, holdout_every: int = 0, point_noise: float = 0.0, gt: str = "raster"):
    """(Dataset, Scene, analytic depths)."""
    if name not in SCENES:
        raise ValueError(f"unknown synthetic scene {name!r}; choose from {sorted(SCENES)}")
    scene = SCENES[name](n_views=n_views, size=size, seed=seed)
    images, depths = render_ground_truth(scene, gt)
    # seed points only where some camera actually sees the surface
    obs = scene.observed_points()
    rng = np.random.default_rng(seed + 17)
    pts = obs[rng.choice(len(obs), size=min(n_points, len(obs)), replace=False)]
    if point_noise:
        pts = pts + rng.normal(scale=point_noise, size=pts.shape)
    seed_cloud = SparseSeed(pts, texture(pts), scene.cameras)
    holdout = list(range(0, n_views, holdout_every)) if holdout_every else []
    ds = Dataset(scene.cameras, images, seed_cloud, 1.0, holdout, [c.name for c in scene.cameras])
    return ds, scene, depths

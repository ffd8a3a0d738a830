"""Triangle soup parameters, activations and initialisation from sparse points."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy.spatial import cKDTree

from . import sh as shmod
from .geometry import EPS_AREA, VertexLayout

log = logging.getLogger(__name__)

PARAMS = ("mu", "sh", "scale_raw", "quat", "opacity_raw", "sigma_raw")

_S3 = np.sqrt(3.0) / 2.0
# Unit offsets at 210, 90 and 330 degrees: V0->V2 runs along +x, normal is +z.
CANONICAL_OFFSETS = np.array([[-_S3, -0.5, 0.0], [0.0, 1.0, 0.0], [_S3, -0.5, 0.0]])


class InitError(ValueError):
    pass


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


# ------------------------------------------------------------- quaternions

def quat_normalize(q):
    q = np.asarray(q, dtype=np.float64)
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def quat_to_rot(q):
    """(..., 4) wxyz, normalised internally -> (..., 3, 3)."""
    w, x, y, z = np.moveaxis(quat_normalize(q), -1, 0)
    R = np.stack([
        1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
        2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
        2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
    ], axis=-1)
    return R.reshape(np.shape(q)[:-1] + (3, 3))


def quat_to_rot_backward(q, gR):
    """Gradient w.r.t. the raw (unnormalised) quaternion given dL/dR."""
    q = np.asarray(q, dtype=np.float64)
    nq = np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = np.moveaxis(q / nq, -1, 0)
    G = gR
    gw = 2 * (-z * G[..., 0, 1] + y * G[..., 0, 2] + z * G[..., 1, 0] - x * G[..., 1, 2]
              - y * G[..., 2, 0] + x * G[..., 2, 1])
    gx = 2 * (y * G[..., 0, 1] + z * G[..., 0, 2] + y * G[..., 1, 0] - 2 * x * G[..., 1, 1]
              - w * G[..., 1, 2] + z * G[..., 2, 0] + w * G[..., 2, 1] - 2 * x * G[..., 2, 2])
    gy = 2 * (-2 * y * G[..., 0, 0] + x * G[..., 0, 1] + w * G[..., 0, 2] + x * G[..., 1, 0]
              + z * G[..., 1, 2] - w * G[..., 2, 0] + z * G[..., 2, 1] - 2 * y * G[..., 2, 2])
    gz = 2 * (-2 * z * G[..., 0, 0] - w * G[..., 0, 1] + x * G[..., 0, 2] + w * G[..., 1, 0]
              - 2 * z * G[..., 1, 1] + y * G[..., 1, 2] + x * G[..., 2, 0] + y * G[..., 2, 1])
    gqn = np.stack([gw, gx, gy, gz], axis=-1)
    qn = q / nq
    return (gqn - qn * np.sum(qn * gqn, axis=-1, keepdims=True)) / nq


def quat_multiply(a, b):
    aw, ax, ay, az = np.moveaxis(np.asarray(a, float), -1, 0)
    bw, bx, by, bz = np.moveaxis(np.asarray(b, float), -1, 0)
    return np.stack([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ], axis=-1)


def rot_to_quat(R):
    """Rotation matrix (3, 3) -> unit quaternion wxyz with w >= 0."""
    R = np.asarray(R, dtype=np.float64)
    K = np.array([
        [R[0, 0] - R[1, 1] - R[2, 2], R[1, 0] + R[0, 1], R[2, 0] + R[0, 2], R[2, 1] - R[1, 2]],
        [R[1, 0] + R[0, 1], R[1, 1] - R[0, 0] - R[2, 2], R[2, 1] + R[1, 2], R[0, 2] - R[2, 0]],
        [R[2, 0] + R[0, 2], R[2, 1] + R[1, 2], R[2, 2] - R[0, 0] - R[1, 1], R[1, 0] - R[0, 1]],
        [R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1], R[0, 0] + R[1, 1] + R[2, 2]],
    ]) / 3.0
    vals, vecs = np.linalg.eigh(K)
    x, y, z, w = vecs[:, np.argmax(vals)]
    q = np.array([w, x, y, z])
    return q if w >= 0 else -q


def random_quaternions(n: int, rng: np.random.Generator) -> np.ndarray:
    q = rng.normal(size=(n, 4))
    return quat_normalize(q)


# ---------------------------------------------------------------- layouts

def layout_vertices(mu, s, R):
    """V^j = mu + R (s_j u_j); mu (N,3), s (N,3), R (N,3,3) -> (N,3,3)."""
    local = s[..., :, None] * CANONICAL_OFFSETS  # (N,3,3) local offsets per vertex
    return mu[..., None, :] + np.einsum("nab,njb->nja", R, local)


def triangle_normals(V):
    """Unit normals (V0V2 x V0V1)/|.| and |.|, for (N,3,3) vertices."""
    N = np.cross(V[:, 2] - V[:, 0], V[:, 1] - V[:, 0])
    nN = np.linalg.norm(N, axis=-1)
    with np.errstate(invalid="ignore", divide="ignore"):
        n = np.where(nN[:, None] > 0, N / nN[:, None], 0.0)
    return n, nN


def circumradius(V):
    """Circumradius of each triangle in (N,3,3)."""
    a = np.linalg.norm(V[:, 1] - V[:, 2], axis=-1)
    b = np.linalg.norm(V[:, 2] - V[:, 0], axis=-1)
    c = np.linalg.norm(V[:, 0] - V[:, 1], axis=-1)
    area = 0.5 * np.linalg.norm(np.cross(V[:, 1] - V[:, 0], V[:, 2] - V[:, 0]), axis=-1)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(area > 0, a * b * c / (4.0 * area), np.inf)


def fermat_point(V):
    """Point seeing all three edges at 120 degrees, for (N,3,3) vertices.

    That is the only anchor from which the canonical offsets can reach the
    vertices exactly. Triangles with an angle >= 120 degrees have no interior
    such point; their barycentre is returned instead.
    """
    V = np.asarray(V, float).reshape(-1, 3, 3)
    a = np.linalg.norm(V[:, 1] - V[:, 2], axis=-1)
    b = np.linalg.norm(V[:, 2] - V[:, 0], axis=-1)
    c = np.linalg.norm(V[:, 0] - V[:, 1], axis=-1)
    side = np.stack([a, b, c], axis=-1)
    cosA = np.clip((b * b + c * c - a * a) / np.maximum(2 * b * c, 1e-300), -1, 1)
    cosB = np.clip((a * a + c * c - b * b) / np.maximum(2 * a * c, 1e-300), -1, 1)
    cosC = np.clip((a * a + b * b - c * c) / np.maximum(2 * a * b, 1e-300), -1, 1)
    ang = np.arccos(np.stack([cosA, cosB, cosC], axis=-1))
    wts = side / np.sin(ang + np.pi / 3)
    ok = np.all(ang < 2 * np.pi / 3 - 1e-9, axis=-1) & np.all(side > 0, axis=-1)
    wts = np.where(ok[:, None], wts, 1.0)
    return np.einsum("nj,nja->na", wts / wts.sum(axis=-1, keepdims=True), V)


def fit_rotation(mu, V, s):
    """Rotation mapping the scaled canonical offsets onto V - mu (Kabsch)."""
    src = s[:, None] * CANONICAL_OFFSETS
    dst = V - mu
    U, _, Vt = np.linalg.svd(dst.T @ src)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt))])
    return U @ D @ Vt


def refit(mu, V):
    """Recover (s, quaternion) for a given anchor mu and target vertices (3,3)."""
    mu = np.asarray(mu, float)
    V = np.asarray(V, float)
    s = np.linalg.norm(V - mu, axis=-1)
    return s, rot_to_quat(fit_rotation(mu, V, s))


class Activated(NamedTuple):
    scale: np.ndarray
    alpha: np.ndarray
    sigma: np.ndarray
    R: np.ndarray


@dataclass
class SparseSeed:
    points: np.ndarray
    colors: np.ndarray
    cameras: list = field(default_factory=list)

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        self.colors = np.asarray(self.colors, dtype=np.float64).reshape(-1, 3)
        if len(self.points) == 0:
            raise InitError("sparse seed is empty")
        if len(self.colors) != len(self.points):
            raise InitError("seed points and colors differ in length")
        if not (np.all(np.isfinite(self.points)) and np.all(np.isfinite(self.colors))):
            raise InitError("seed contains non-finite values")


class TriangleSoup:
    """Structure-of-arrays triangle parameters with gradient and Adam buffers."""

    def __init__(self, mu, sh, scale_raw, quat, opacity_raw, sigma_raw, active_sh_degree=0):
        self.mu = np.ascontiguousarray(mu, dtype=np.float64).reshape(-1, 3)
        n = len(self.mu)
        sh = np.asarray(sh, dtype=np.float64)
        self.sh = np.ascontiguousarray(sh.reshape(n, 3, -1, 3) if n else sh.reshape(0, 3, sh.shape[-2], 3))
        self.scale_raw = np.ascontiguousarray(scale_raw, dtype=np.float64).reshape(n, 3)
        self.quat = np.ascontiguousarray(quat, dtype=np.float64).reshape(n, 4)
        self.opacity_raw = np.ascontiguousarray(opacity_raw, dtype=np.float64).reshape(n)
        self.sigma_raw = np.ascontiguousarray(sigma_raw, dtype=np.float64).reshape(n)
        self.max_sh_degree = int(round(np.sqrt(self.sh.shape[2]))) - 1
        self.active_sh_degree = min(active_sh_degree, self.max_sh_degree)
        self.grad = {k: np.zeros_like(getattr(self, k)) for k in PARAMS}
        self.exp_avg = {k: np.zeros_like(getattr(self, k)) for k in PARAMS}
        self.exp_avg_sq = {k: np.zeros_like(getattr(self, k)) for k in PARAMS}
        # split/clone boundary; set by init_from_points
        self.split_size = np.inf

    @property
    def count(self) -> int:
        return len(self.mu)

    def __len__(self):
        return self.count

    def params(self):
        return {k: getattr(self, k) for k in PARAMS}

    # ------------------------------------------------------- activations
    @property
    def scale(self):
        return np.exp(self.scale_raw)

    @property
    def alpha(self):
        return sigmoid(self.opacity_raw)

    @property
    def sigma(self):
        return np.exp(self.sigma_raw)

    @property
    def rotation(self):
        return quat_to_rot(self.quat)

    def activate(self) -> Activated:
        return Activated(self.scale, self.alpha, self.sigma, self.rotation)

    def vertices(self) -> np.ndarray:
        return layout_vertices(self.mu, self.scale, self.rotation)

    def layout(self, idx: int, eps_area: float = EPS_AREA) -> VertexLayout:
        if not 0 <= idx < self.count:
            raise IndexError(idx)
        V = layout_vertices(self.mu[idx:idx + 1], self.scale[idx:idx + 1], self.rotation[idx:idx + 1])[0]
        return VertexLayout.from_vertices(V, eps_area)

    def degenerate(self, eps_area: float = EPS_AREA) -> np.ndarray:
        _, nN = triangle_normals(self.vertices())
        return ~(0.5 * nN >= eps_area)

    # ----------------------------------------------------------- backward
    def zero_grad(self):
        for g in self.grad.values():
            g.fill(0.0)

    def vertices_backward(self, gV: np.ndarray):
        """Accumulate dL/dV (N,3,3) into the mu / scale_raw / quat gradients."""
        s = self.scale
        R = self.rotation
        self.grad["mu"] += gV.sum(axis=1)
        dirs = np.einsum("nab,jb->nja", R, CANONICAL_OFFSETS)  # R u_j
        gs = np.einsum("nja,nja->nj", gV, dirs)
        self.grad["scale_raw"] += gs * s
        gR = np.einsum("nja,nj,jb->nab", gV, s, CANONICAL_OFFSETS)
        self.grad["quat"] += quat_to_rot_backward(self.quat, gR)

    def activations_backward(self, g_alpha=None, g_sigma=None):
        if g_alpha is not None:
            a = self.alpha
            self.grad["opacity_raw"] += g_alpha * a * (1.0 - a)
        if g_sigma is not None:
            self.grad["sigma_raw"] += g_sigma * self.sigma

    # ------------------------------------------------------- population
    def _apply(self, fn):
        for k in PARAMS:
            setattr(self, k, np.ascontiguousarray(fn(getattr(self, k))))
            self.grad[k] = np.ascontiguousarray(fn(self.grad[k]))
            self.exp_avg[k] = np.ascontiguousarray(fn(self.exp_avg[k]))
            self.exp_avg_sq[k] = np.ascontiguousarray(fn(self.exp_avg_sq[k]))

    def keep(self, mask_or_idx):
        self._apply(lambda a: a[mask_or_idx])

    def extend(self, other: "TriangleSoup"):
        """Append another soup's parameters and optimiser state."""
        for k in PARAMS:
            setattr(self, k, np.ascontiguousarray(np.concatenate([getattr(self, k), getattr(other, k)])))
            self.grad[k] = np.concatenate([self.grad[k], other.grad[k]])
            self.exp_avg[k] = np.concatenate([self.exp_avg[k], other.exp_avg[k]])
            self.exp_avg_sq[k] = np.concatenate([self.exp_avg_sq[k], other.exp_avg_sq[k]])

    def subset(self, idx) -> "TriangleSoup":
        out = self.copy()
        out.keep(idx)
        return out

    def copy(self) -> "TriangleSoup":
        out = TriangleSoup(*(getattr(self, k).copy() for k in PARAMS), active_sh_degree=self.active_sh_degree)
        for k in PARAMS:
            out.grad[k] = self.grad[k].copy()
            out.exp_avg[k] = self.exp_avg[k].copy()
            out.exp_avg_sq[k] = self.exp_avg_sq[k].copy()
        out.split_size = self.split_size
        return out

    def check_lockstep(self):
        n = self.count
        for k in PARAMS:
            for arr in (getattr(self, k), self.grad[k], self.exp_avg[k], self.exp_avg_sq[k]):
                if len(arr) != n:
                    raise AssertionError(f"buffer {k} has length {len(arr)} != {n}")

    @classmethod
    def from_vertices(cls, V, sh, opacity, sigma, mu=None):
        """Build a soup reproducing given vertices (mu defaults to each Fermat point)."""
        V = np.asarray(V, dtype=np.float64).reshape(-1, 3, 3)
        n = len(V)
        mu = fermat_point(V) if mu is None else np.asarray(mu, float).reshape(n, 3)
        s = np.empty((n, 3))
        q = np.empty((n, 4))
        for i in range(n):
            s[i], q[i] = refit(mu[i], V[i])
        op = np.broadcast_to(np.asarray(opacity, float), (n,))
        sg = np.broadcast_to(np.asarray(sigma, float), (n,))
        return cls(mu, sh, np.log(s), q, logit(op), np.log(sg))


def knn_mean_distance(points: np.ndarray, k: int = 3) -> np.ndarray:
    tree = cKDTree(points)
    dist, _ = tree.query(points, k=k + 1)
    return dist[:, 1:].mean(axis=1)


def init_from_points(seed: SparseSeed, cfg=None, rng_seed: int = 0) -> TriangleSoup:
    """One equilateral triangle per seed point, randomly rotated."""
    sh_degree = getattr(cfg, "sh_degree", 3)
    sigma_fraction = getattr(cfg, "sigma_init_fraction", 0.5)
    init_opacity = getattr(cfg, "init_opacity", 0.1)
    if not isinstance(seed, SparseSeed):
        seed = SparseSeed(*seed)
    pts = seed.points
    if len(pts) < 4:
        raise InitError(f"need at least 4 seed points, got {len(pts)}")
    n = len(pts)
    dist = knn_mean_distance(pts, 3)
    if np.any(dist <= 0):
        dist = np.maximum(dist, np.median(dist[dist > 0]) if np.any(dist > 0) else 1e-3)
    rng = np.random.default_rng(rng_seed)
    sh = np.zeros((n, 3, shmod.num_coeffs(sh_degree), 3))
    sh[:, :, 0, :] = shmod.rgb_to_sh(seed.colors)[:, None, :]
    soup = TriangleSoup(
        mu=pts.copy(),
        sh=sh,
        scale_raw=np.repeat(np.log(dist)[:, None], 3, axis=1),
        quat=random_quaternions(n, rng),
        opacity_raw=np.full(n, float(logit(init_opacity))),
        sigma_raw=np.log(4.0 / (sigma_fraction * dist)),
    )
    soup.split_size = float(np.median(dist))
    log.info("initialised %d triangles, median circumradius %.4g", n, soup.split_size)
    return soup

"""Image-space and 3D losses. Each returns the scalar and its gradient(s)."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate1d

from .camera import Camera

SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


@dataclass
class LossWeights:
    ssim: float = 1.0      # photometric mix term
    normal: float = 0.05
    smooth: float = 0.8
    conn: float = 10.0
    gamma: float = 0.2

    def __post_init__(self):
        for k, v in self.__dict__.items():
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"loss weight {k} must be finite and non-negative, got {v}")
        if self.gamma > 1:
            raise ValueError("gamma must lie in [0, 1]")


def _check_same(a, b):
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")


# ------------------------------------------------------------------- SSIM

def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - size // 2
    g = np.exp(-(x ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def _blur(img, g):
    out = correlate1d(img, g, axis=0, mode="constant")
    return correlate1d(out, g, axis=1, mode="constant")


def ssim_map(x: np.ndarray, y: np.ndarray, size: int = 11, sigma: float = 1.5):
    """Per-pixel, per-channel SSIM with a zero-padded Gaussian window."""
    g = gaussian_window(size, sigma)
    mx, my = _blur(x, g), _blur(y, g)
    sxx = _blur(x * x, g) - mx * mx
    syy = _blur(y * y, g) - my * my
    sxy = _blur(x * y, g) - mx * my
    A1 = 2 * mx * my + SSIM_C1
    A2 = 2 * sxy + SSIM_C2
    B1 = mx * mx + my * my + SSIM_C1
    B2 = sxx + syy + SSIM_C2
    return (A1 * A2) / (B1 * B2), (mx, my, A1, A2, B1, B2, g)


def ssim(x, y) -> float:
    x = np.asarray(x, float)
    y = np.asarray(y, float)
    _check_same(x, y)
    return float(ssim_map(x, y)[0].mean())


def ssim_backward(x, y, g_map):
    """Gradient w.r.t. x of sum(g_map * ssim_map(x, y))."""
    S, (mx, my, A1, A2, B1, B2, g) = ssim_map(x, y)
    BB = B1 * B2
    d_mx = 2 * my * A2 / BB - S * 2 * mx / B1
    d_sxx = -S / B2
    d_sxy = 2 * A1 / BB
    g_mx = g_map * (d_mx - 2 * mx * d_sxx - my * d_sxy)
    g_exx = g_map * d_sxx
    g_exy = g_map * d_sxy
    return _blur(g_mx, g) + 2 * x * _blur(g_exx, g) + y * _blur(g_exy, g)


def photometric_loss(rendered, target, gamma: float = 0.2):
    """(1 - gamma) * mean |r - t| + gamma * (1 - mean SSIM) / 2, and d/d rendered."""
    r = np.asarray(rendered, float)
    t = np.asarray(target, float)
    _check_same(r, t)
    n = r.size
    diff = r - t
    l1 = np.abs(diff).mean()
    grad = (1 - gamma) * np.sign(diff) / n
    if gamma > 0:
        S, _ = ssim_map(r, t)
        loss = (1 - gamma) * l1 + gamma * (1 - S.mean()) / 2
        grad = grad + ssim_backward(r, t, np.full(r.shape, -gamma / (2 * n)))
    else:
        loss = (1 - gamma) * l1
    return float(loss), grad


# ---------------------------------------------------------- normal / depth

def depth_points(depth: np.ndarray, cam: Camera) -> np.ndarray:
    """Camera-space points from per-pixel ray distance, (H, W, 3)."""
    return depth[..., None] * cam.pixel_dirs_camera()


def depth_normals(depth: np.ndarray, cam: Camera):
    """Camera-facing unit normals from forward differences of the depth map.

    Returns (normals (H,W,3), valid mask (H,W), raw cross products).
    """
    X = depth_points(depth, cam)
    H, W = depth.shape
    m = np.zeros((H, W, 3))
    valid = np.zeros((H, W), bool)
    dx = X[:-1, 1:] - X[:-1, :-1]
    dy = X[1:, :-1] - X[:-1, :-1]
    m[:-1, :-1] = np.cross(dy, dx)
    valid[:-1, :-1] = (depth[:-1, :-1] > 0) & (depth[:-1, 1:] > 0) & (depth[1:, :-1] > 0)
    nm = np.linalg.norm(m, axis=-1)
    valid &= nm > 1e-12
    n = np.where(valid[..., None], m / np.where(nm > 0, nm, 1.0)[..., None], 0.0)
    return n, valid, m


def normal_consistency_loss(normals: np.ndarray, depth: np.ndarray, cam: Camera):
    """mean(1 - n_render . n_depth) over valid pixels; grads on (normals, depth)."""
    H, W = depth.shape
    nc = normals @ cam.R.T
    nn = np.linalg.norm(nc, axis=-1)
    nd, valid, m = depth_normals(depth, cam)
    valid = valid & (nn > 1e-8)
    cnt = int(valid.sum())
    g_norm = np.zeros((H, W, 3))
    g_depth = np.zeros((H, W))
    if cnt == 0:
        return 0.0, g_norm, g_depth
    nh = nc / np.where(nn > 0, nn, 1.0)[..., None]
    dots = np.sum(nh * nd, axis=-1)
    loss = float(np.sum(1.0 - dots[valid]) / cnt)
    vm = valid[..., None]
    g_nh = np.where(vm, -nd / cnt, 0.0)
    g_nd = np.where(vm, -nh / cnt, 0.0)
    g_nc = (g_nh - nh * np.sum(nh * g_nh, axis=-1, keepdims=True)) / np.where(nn > 0, nn, 1.0)[..., None]
    g_norm = g_nc @ cam.R
    nm = np.linalg.norm(m, axis=-1)
    g_m = (g_nd - nd * np.sum(nd * g_nd, axis=-1, keepdims=True)) / np.where(nm > 0, nm, 1.0)[..., None]
    g_m = np.where(vm, g_m, 0.0)
    X = depth_points(depth, cam)
    dx = X[:-1, 1:] - X[:-1, :-1]
    dy = X[1:, :-1] - X[:-1, :-1]
    gm = g_m[:-1, :-1]
    g_dy = np.cross(dx, gm)
    g_dx = np.cross(gm, dy)
    gX = np.zeros((H, W, 3))
    gX[:-1, 1:] += g_dx
    gX[:-1, :-1] -= g_dx
    gX[1:, :-1] += g_dy
    gX[:-1, :-1] -= g_dy
    g_depth = np.sum(gX * cam.pixel_dirs_camera(), axis=-1)
    return loss, g_norm, g_depth


def smoothness_loss(depth: np.ndarray, rgb: np.ndarray, positive_exponent: bool = False):
    """Edge-aware depth smoothness, normalised by the pixel count."""
    depth = np.asarray(depth, float)
    rgb = np.asarray(rgb, float)
    if depth.shape != rgb.shape[:2]:
        raise ValueError(f"depth {depth.shape} and image {rgb.shape} differ")
    H, W = depth.shape
    n = H * W
    sgn = 1.0 if positive_exponent else -1.0
    wx = np.exp(sgn * np.abs(rgb[:, 1:] - rgb[:, :-1]).mean(axis=-1))
    wy = np.exp(sgn * np.abs(rgb[1:] - rgb[:-1]).mean(axis=-1))
    valid = depth > 0
    vx = valid[:, 1:] & valid[:, :-1]
    vy = valid[1:] & valid[:-1]
    dDx = depth[:, 1:] - depth[:, :-1]
    dDy = depth[1:] - depth[:-1]
    loss = (np.sum(np.abs(dDx) * wx * vx) + np.sum(np.abs(dDy) * wy * vy)) / n
    g = np.zeros_like(depth)
    gx = np.sign(dDx) * wx * vx / n
    gy = np.sign(dDy) * wy * vy / n
    g[:, 1:] += gx
    g[:, :-1] -= gx
    g[1:] += gy
    g[:-1] -= gy
    return float(loss), g


# ------------------------------------------------------------ connectivity

EDGE_VERTS = np.array([[0, 1], [1, 2], [2, 0]])


def _unit_normals(V):
    Nv = np.cross(V[:, 2] - V[:, 0], V[:, 1] - V[:, 0])
    nN = np.linalg.norm(Nv, axis=-1, keepdims=True)
    return Nv / np.where(nN > 0, nN, 1.0), nN


def _normals_backward(V, g_n):
    n, nN = _unit_normals(V)
    a = V[:, 2] - V[:, 0]
    b = V[:, 1] - V[:, 0]
    gNv = (g_n - n * np.sum(n * g_n, axis=-1, keepdims=True)) / np.where(nN > 0, nN, np.inf)
    ga = np.cross(b, gNv)
    gb = np.cross(gNv, a)
    gV = np.zeros_like(V)
    gV[:, 2] += ga
    gV[:, 1] += gb
    gV[:, 0] -= ga + gb
    return gV


def connectivity_loss(soup, graph, visible=None, reduction: str = "sum", orient_normals: bool = True,
                      vertices=None):
    """Paired-vertex distance + normal misalignment over connections owned by visible triangles.

    Returns (loss, dL/dV (N,3,3)). Call ``soup.vertices_backward`` to route the
    vertex gradient into the raw parameters.
    """
    V = soup.vertices() if vertices is None else vertices
    N = len(V)
    gV = np.zeros_like(V)
    if graph.count != N:
        raise ValueError(f"stale edge graph: built for {graph.count} triangles, soup has {N}")
    if len(graph) == 0:
        return 0.0, gV
    ta, ea, tb, eb, rev = graph.tri_a, graph.edge_a, graph.tri_b, graph.edge_b, graph.reversed
    use = np.ones(len(ta), bool)
    if visible is not None:
        vis = np.zeros(N, bool)
        vis[np.asarray(visible, dtype=np.int64)] = True
        use &= vis[ta]
    ta, ea, tb, eb, rev = ta[use], ea[use], tb[use], eb[use], rev[use]
    if len(ta) == 0:
        return 0.0, gV
    ia0, ia1 = EDGE_VERTS[ea, 0], EDGE_VERTS[ea, 1]
    ib0 = np.where(rev, EDGE_VERTS[eb, 1], EDGE_VERTS[eb, 0])
    ib1 = np.where(rev, EDGE_VERTS[eb, 0], EDGE_VERTS[eb, 1])
    d0 = V[ta, ia0] - V[tb, ib0]
    d1 = V[ta, ia1] - V[tb, ib1]
    n0 = np.linalg.norm(d0, axis=-1)
    n1 = np.linalg.norm(d1, axis=-1)
    nrm, _ = _unit_normals(V)
    cosang = np.sum(nrm[ta] * nrm[tb], axis=-1)
    s = np.where(cosang < 0, -1.0, 1.0) if orient_normals else np.ones_like(cosang)
    terms = 0.5 * (n0 + n1) + (1.0 - s * cosang)
    scale = 1.0 / len(ta) if reduction == "mean" else 1.0
    loss = float(terms.sum() * scale)
    u0 = 0.5 * scale * d0 / np.where(n0 > 0, n0, np.inf)[:, None]
    u1 = 0.5 * scale * d1 / np.where(n1 > 0, n1, np.inf)[:, None]
    np.add.at(gV, (ta, ia0), u0)
    np.add.at(gV, (tb, ib0), -u0)
    np.add.at(gV, (ta, ia1), u1)
    np.add.at(gV, (tb, ib1), -u1)
    g_n = np.zeros((N, 3))
    np.add.at(g_n, ta, -(scale * s)[:, None] * nrm[tb])
    np.add.at(g_n, tb, -(scale * s)[:, None] * nrm[ta])
    gV += _normals_backward(V, g_n)
    return loss, gV


# ------------------------------------------------------------------ total

@dataclass
class LossSchedule:
    normal_from: int = 7000
    smooth_from: int = 10000
    conn_from: int = 10000

    def active(self, iteration: int) -> dict:
        return dict(ssim=True, normal=iteration >= self.normal_from,
                    smooth=iteration >= self.smooth_from, conn=iteration >= self.conn_from)


def total_loss(out, target, soup, weights: LossWeights, iteration: int,
               schedule: LossSchedule | None = None, graph=None, visible=None,
               smoothness_positive_exponent: bool = False, conn_reduction: str = "sum",
               conn_orient_normals: bool = True, backward: bool = True):
    """Weighted scheduled loss; accumulates every term's gradient into ``soup.grad``.

    Returns (total, dict of unweighted term values).
    """
    from .rasterizer import render_backward

    schedule = schedule or LossSchedule()
    on = schedule.active(iteration)
    cam = out.camera
    H, W = cam.height, cam.width
    gC = np.zeros((H, W, 3))
    gD = np.zeros((H, W))
    gN = np.zeros((H, W, 3))
    terms = {}
    total = 0.0
    if weights.ssim > 0:
        l, g = photometric_loss(out.color, target, weights.gamma)
        terms["ssim"] = l
        total += weights.ssim * l
        gC += weights.ssim * g
    if on["normal"] and weights.normal > 0:
        l, g_n, g_d = normal_consistency_loss(out.normal, out.depth, cam)
        terms["normal"] = l
        total += weights.normal * l
        gN += weights.normal * g_n
        gD += weights.normal * g_d
    if on["smooth"] and weights.smooth > 0:
        l, g_d = smoothness_loss(out.depth, target, smoothness_positive_exponent)
        terms["smooth"] = l
        total += weights.smooth * l
        gD += weights.smooth * g_d
    gV_conn = None
    if on["conn"] and weights.conn > 0 and graph is not None:
        vis = out.visible if visible is None else visible
        l, gV_conn = connectivity_loss(soup, graph, vis, conn_reduction, conn_orient_normals)
        terms["conn"] = l
        total += weights.conn * l
    if backward:
        if np.any(gC) or np.any(gD) or np.any(gN):
            render_backward(out, gC, gD, gN, soup=soup)
        if gV_conn is not None:
            soup.vertices_backward(weights.conn * gV_conn)
    return float(total), terms

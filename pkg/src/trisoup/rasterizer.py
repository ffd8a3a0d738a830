"""Tile-based triangle-soup rasterizer: forward compositing and analytic backward.

Per pixel, every triangle binned to the pixel's tile is intersected with the
pixel ray, the hits are sorted front to back by ray depth and alpha-composited
with effective opacity alpha * w_sigma. The backward pass re-runs the per-pixel
gather/sort (cheaper than storing contributor lists) and walks the sequence in
reverse.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numba as nb
import numpy as np

from . import sh as shmod
from .camera import Camera
from .geometry import (EPS_AREA, axpy, diffuse_weight_kernel, intersect_backward_kernel,
                       intersect_kernel)
from .soup import TriangleSoup, triangle_normals

MEDIAN, MEAN = 0, 1


@dataclass
class RasterSettings:
    tile_size: int = 16
    depth_mode: str = "median"
    background: tuple = (0.0, 0.0, 0.0)
    t_min: float = 1e-4
    alpha_min: float = 1.0 / 255.0
    near: float = 0.01
    transmittance_uses_diffuse: bool = True
    per_vertex_view_dirs: bool = False
    deterministic: bool = True
    reduce_chunks: int = 8

    def __post_init__(self):
        if self.depth_mode not in ("median", "mean"):
            raise ValueError(f"depth_mode must be 'median' or 'mean', got {self.depth_mode!r}")


@dataclass
class Prepared:
    """Per-camera triangle data shared by the forward and backward kernels."""
    V: np.ndarray          # (N,3,3)
    normal: np.ndarray     # (N,3) unit, flipped to face the camera
    flip: np.ndarray       # (N,) +1/-1 applied to the stored normal
    alpha: np.ndarray
    sigma: np.ndarray
    colors: np.ndarray     # (N,3,3) clamped vertex colours
    color_mask: np.ndarray  # (N,3,3) True where the clamp is inactive
    view_dirs: np.ndarray  # (N,3) or (N,3,3)
    view_len: np.ndarray
    basis: np.ndarray      # (N,K) or (N,3,K)
    ok: np.ndarray         # (N,) bool
    cull: np.ndarray = None  # (N,5): B - C, |B - C|^2, reach^2 (see _cull_data)


@dataclass
class Bins:
    offsets: np.ndarray
    ids: np.ndarray
    tiles_x: int
    tiles_y: int
    tile_size: int
    extent: np.ndarray     # (N,) projected bbox diagonal in pixels (0 when culled)

    def tile_list(self, tx: int, ty: int) -> np.ndarray:
        t = ty * self.tiles_x + tx
        return self.ids[self.offsets[t]:self.offsets[t + 1]]

    @property
    def visible(self) -> np.ndarray:
        return np.unique(self.ids)


@dataclass
class RenderOutput:
    color: np.ndarray
    depth: np.ndarray
    normal: np.ndarray
    transmittance: np.ndarray
    n_contrib: np.ndarray
    median_id: np.ndarray
    weight_sum: np.ndarray
    camera: Camera = None
    settings: RasterSettings = None
    prepared: Prepared = None
    bins: Bins = None
    soup: TriangleSoup = field(default=None, repr=False)

    @property
    def visible(self) -> np.ndarray:
        """Triangles binned to at least one tile of this view."""
        return self.bins.visible

    def contributors(self, y: int, x: int) -> list[dict]:
        """Contributor records (front to back) for one pixel."""
        p, cam, st = self.prepared, self.camera, self.settings
        ts = self.bins.tile_size
        ids = self.bins.tile_list(x // ts, y // ts)
        rec = _pixel_records(x, y, ids, p.V, p.alpha, p.sigma, *_cam_args(cam), st.near,
                             st.alpha_min, st.t_min, st.transmittance_uses_diffuse, p.cull)
        out = []
        for k, wn, l0, l1, l2, d, l, T in rec:
            out.append(dict(tri=int(k), weight=wn, lam=np.array([l0, l1, l2]), depth=d,
                            signed_edge_dist=l, transmittance=T))
        return out


def _cam_args(cam: Camera):
    return (float(cam.fx), float(cam.fy), float(cam.cx), float(cam.cy),
            np.ascontiguousarray(cam.R), np.ascontiguousarray(cam.center))


# ---------------------------------------------------------------- prepare

def prepare(soup: TriangleSoup, cam: Camera, st: RasterSettings) -> Prepared:
    V = soup.vertices()
    n, nN = triangle_normals(V)
    C = cam.center
    B = V.mean(axis=1)
    flip = np.where(np.einsum("ni,ni->n", n, B - C) > 0, -1.0, 1.0)
    alpha = soup.alpha
    sigma = soup.sigma
    deg = soup.active_sh_degree
    K = shmod.num_coeffs(deg)
    if st.per_vertex_view_dirs:
        rel = V - C
    else:
        rel = soup.mu - C
    view_len = np.linalg.norm(rel, axis=-1)
    dirs = rel / np.maximum(view_len, 1e-30)[..., None]
    Y = shmod.sh_basis(dirs, deg)
    if st.per_vertex_view_dirs:
        raw = np.einsum("njk,njkc->njc", Y, soup.sh[:, :, :K]) + 0.5
    else:
        raw = np.einsum("nk,njkc->njc", Y, soup.sh[:, :, :K]) + 0.5
    mask = raw > 0
    ok = (0.5 * nN >= EPS_AREA) & (alpha >= st.alpha_min) & np.all(np.isfinite(V), axis=(1, 2))
    return Prepared(np.ascontiguousarray(V), np.ascontiguousarray(n * flip[:, None]), flip,
                    alpha, sigma, np.ascontiguousarray(np.where(mask, raw, 0.0)), mask,
                    dirs, view_len, Y, ok, _cull_data(V, B, C, alpha, sigma, st.alpha_min))


def _cull_data(V, B, C, alpha, sigma, alpha_min):
    """Bounding-sphere test data for a cheap, conservative per-ray rejection.

    A hit point P lies on the ray, so |P - B| >= dist(ray, B). The in-plane
    distance to the triangle is then at least dist(ray, B) - max_j |V_j - B|,
    and once that exceeds the falloff cutoff log(alpha / alpha_min - 1) / sigma
    the weighted opacity is below alpha_min and the exact test would drop it.
    """
    rad = np.sqrt(np.max(np.sum((V - B[:, None]) ** 2, axis=-1), axis=1))
    with np.errstate(divide="ignore", invalid="ignore"):
        cut = np.log(np.maximum(alpha / alpha_min - 1.0, 1e-300)) / sigma
    reach = np.where(np.isfinite(cut), rad + np.maximum(cut, 0.0), np.inf)
    reach = reach * (1.0 + 1e-9) + 1e-12
    BC = B - C
    out = np.empty((len(V), 5))
    out[:, :3] = BC
    out[:, 3] = np.sum(BC * BC, axis=-1)
    out[:, 4] = np.where(np.isfinite(reach), reach * reach, np.inf)
    return out


# ----------------------------------------------------------------- binning

def tile_bin(soup_or_prep, cam: Camera, st: RasterSettings | None = None) -> Bins:
    """Conservative per-tile triangle lists (ids ascending within a tile)."""
    st = st or RasterSettings()
    p = soup_or_prep if isinstance(soup_or_prep, Prepared) else prepare(soup_or_prep, cam, st)
    ts = st.tile_size
    tx = (cam.width + ts - 1) // ts
    ty = (cam.height + ts - 1) // ts
    N = len(p.V)
    if N == 0:
        return Bins(np.zeros(tx * ty + 1, np.int64), np.zeros(0, np.int64), tx, ty, ts, np.zeros(0))
    # diffuse margin: alpha * w >= alpha_min requires l >= logit(alpha_min / alpha) / sigma
    ratio = np.clip(st.alpha_min / p.alpha, 1e-300, 1.0)
    with np.errstate(divide="ignore"):
        margin = np.maximum(0.0, -(np.log(ratio) - np.log1p(-ratio))) / p.sigma
    # alpha below alpha_min never contributes; prepare() already marks it not ok
    margin = np.where(ratio >= 1.0, 0.0, margin)
    margin = margin * (1.0 + 1e-6) + 1e-12
    ex = p.V[:, 2] - p.V[:, 0]
    ex /= np.maximum(np.linalg.norm(ex, axis=-1, keepdims=True), 1e-300)
    ey = np.cross(p.normal, ex)
    corners = []
    for sx in (-1.0, 1.0):
        for sy in (-1.0, 1.0):
            off = (sx * ex + sy * ey) * margin[:, None]
            corners.append(p.V + off[:, None, :])
    pts = np.concatenate(corners, axis=1)  # (N,12,3)
    Xc = pts @ cam.R.T + cam.t
    z = Xc[..., 2]
    zeps = 1e-9
    behind = np.all(z <= zeps, axis=1)
    straddle = np.any(z <= zeps, axis=1) & ~behind
    with np.errstate(divide="ignore", invalid="ignore"):
        u = cam.fx * Xc[..., 0] / z + cam.cx
        v = cam.fy * Xc[..., 1] / z + cam.cy
    umin, umax = u.min(axis=1), u.max(axis=1)
    vmin, vmax = v.min(axis=1), v.max(axis=1)
    umin = np.where(straddle, -np.inf, umin)
    vmin = np.where(straddle, -np.inf, vmin)
    umax = np.where(straddle, np.inf, umax)
    vmax = np.where(straddle, np.inf, vmax)
    valid = p.ok & ~behind & np.isfinite(margin)
    with np.errstate(invalid="ignore"):
        x0 = np.clip(np.ceil(umin - 0.5), 0, cam.width)
        x1 = np.clip(np.floor(umax - 0.5), -1, cam.width - 1)
        y0 = np.clip(np.ceil(vmin - 0.5), 0, cam.height)
        y1 = np.clip(np.floor(vmax - 0.5), -1, cam.height - 1)
    valid &= (x1 >= x0) & (y1 >= y0)
    x0 = np.where(valid, x0, 0).astype(np.int64)
    x1 = np.where(valid, x1, -1).astype(np.int64)
    y0 = np.where(valid, y0, 0).astype(np.int64)
    y1 = np.where(valid, y1, -1).astype(np.int64)
    offsets, ids = _build_bins(x0 // ts, np.where(valid, x1 // ts, -1), y0 // ts,
                               np.where(valid, y1 // ts, -1), tx, ty)
    extent = np.where(valid, np.hypot(np.clip(umax, -1e6, 1e6) - np.clip(umin, -1e6, 1e6),
                                      np.clip(vmax, -1e6, 1e6) - np.clip(vmin, -1e6, 1e6)), 0.0)
    return Bins(offsets, ids, tx, ty, ts, extent)


@nb.njit(cache=True)
def _build_bins(tx0, tx1, ty0, ty1, tx, ty):
    counts = np.zeros(tx * ty + 1, np.int64)
    for k in range(tx0.shape[0]):
        for j in range(ty0[k], ty1[k] + 1):
            for i in range(tx0[k], tx1[k] + 1):
                counts[j * tx + i + 1] += 1
    offsets = np.cumsum(counts)
    fill = offsets[:-1].copy()
    ids = np.empty(offsets[-1], np.int64)
    for k in range(tx0.shape[0]):
        for j in range(ty0[k], ty1[k] + 1):
            for i in range(tx0[k], tx1[k] + 1):
                t = j * tx + i
                ids[fill[t]] = k
                fill[t] += 1
    return offsets, ids


def full_screen_bins(prep: Prepared, cam: Camera) -> Bins:
    """A single tile covering the whole image containing every renderable triangle."""
    ids = np.nonzero(prep.ok)[0].astype(np.int64)
    size = max(cam.width, cam.height)
    return Bins(np.array([0, len(ids)], np.int64), ids, 1, 1, size, np.zeros(len(prep.V)))


# ----------------------------------------------------------- pixel kernels

@nb.njit(inline="always")
def _pixel_ray(px, py, fx, fy, cx, cy, R):
    dx = (px + 0.5 - cx) / fx
    dy = (py + 0.5 - cy) / fy
    inv = 1.0 / math.sqrt(dx * dx + dy * dy + 1.0)
    dx *= inv
    dy *= inv
    dz = inv
    return (R[0, 0] * dx + R[1, 0] * dy + R[2, 0] * dz,
            R[0, 1] * dx + R[1, 1] * dy + R[2, 1] * dz,
            R[0, 2] * dx + R[1, 2] * dy + R[2, 2] * dz)


@nb.njit(inline="always")
def _v(V, k, j):
    return (V[k, j, 0], V[k, j, 1], V[k, j, 2])


@nb.njit(cache=True)
def _stable_order(key, cnt, order):
    """Insertion sort of indices 0..cnt-1 by key; stable, allocation free."""
    for i in range(cnt):
        kv = key[i]
        j = i
        while j > 0 and key[order[j - 1]] > kv:
            order[j] = order[j - 1]
            j -= 1
        order[j] = i
    return order[:cnt]


@nb.njit(cache=True)
def _gather(ids, V, alpha, sigma, C, r, near, alpha_min, cull, buf_k, buf_d, buf_lam, buf_l, buf_w):
    cnt = 0
    for t in range(ids.shape[0]):
        k = ids[t]
        proj = cull[k, 0] * r[0] + cull[k, 1] * r[1] + cull[k, 2] * r[2]
        if cull[k, 3] - proj * proj > cull[k, 4]:
            continue
        ok, d, l0, l1, l2, l = intersect_kernel(_v(V, k, 0), _v(V, k, 1), _v(V, k, 2), C, r, near)
        if not ok:
            continue
        w, _, _ = diffuse_weight_kernel(l, sigma[k])
        if alpha[k] * w < alpha_min:
            continue
        buf_k[cnt] = k
        buf_d[cnt] = d
        buf_lam[cnt, 0] = l0
        buf_lam[cnt, 1] = l1
        buf_lam[cnt, 2] = l2
        buf_l[cnt] = l
        buf_w[cnt] = w
        cnt += 1
    return cnt


@nb.njit(cache=True)
def _pixel_records(px, py, ids, V, alpha, sigma, fx, fy, cx, cy, R, C, near, alpha_min, t_min, trans_diffuse,
                   cull):
    n = ids.shape[0]
    buf_k = np.empty(n, np.int64)
    buf_d = np.empty(n)
    buf_lam = np.empty((n, 3))
    buf_l = np.empty(n)
    buf_w = np.empty(n)
    Ct = (C[0], C[1], C[2])
    r = _pixel_ray(px, py, fx, fy, cx, cy, R)
    cnt = _gather(ids, V, alpha, sigma, Ct, r, near, alpha_min, cull, buf_k, buf_d, buf_lam, buf_l, buf_w)
    order = _stable_order(buf_d, cnt, np.empty(n, np.int64))
    out = []
    T = 1.0
    for o in order:
        k = buf_k[o]
        a = alpha[k] * buf_w[o]
        b = a if trans_diffuse else alpha[k]
        out.append((k, a * T, buf_lam[o, 0], buf_lam[o, 1], buf_lam[o, 2], buf_d[o], buf_l[o], T))
        T *= 1.0 - b
        if T < t_min:
            break
    return out


@nb.njit(cache=True, parallel=True)
def _render_kernel(offsets, ids, tiles_x, tile_w, tile_h, W, H, V, nrm, alpha, sigma, col,
                   fx, fy, cx, cy, R, C, near, alpha_min, t_min, trans_diffuse, mean_mode, bg, cull,
                   out_color, out_depth, out_normal, out_T, out_n, out_med, out_wsum):
    ntiles = offsets.shape[0] - 1
    Ct = (C[0], C[1], C[2])
    for t in nb.prange(ntiles):
        tyi = t // tiles_x
        txi = t - tyi * tiles_x
        tid = ids[offsets[t]:offsets[t + 1]]
        n = tid.shape[0]
        buf_k = np.empty(n, np.int64)
        buf_d = np.empty(n)
        buf_lam = np.empty((n, 3))
        buf_l = np.empty(n)
        buf_w = np.empty(n)
        buf_o = np.empty(n, np.int64)
        for py in range(tyi * tile_h, min((tyi + 1) * tile_h, H)):
            for px in range(txi * tile_w, min((txi + 1) * tile_w, W)):
                r = _pixel_ray(px, py, fx, fy, cx, cy, R)
                cnt = _gather(tid, V, alpha, sigma, Ct, r, near, alpha_min, cull,
                              buf_k, buf_d, buf_lam, buf_l, buf_w)
                order = _stable_order(buf_d, cnt, np.empty(n, np.int64))
                T = 1.0
                c0 = c1 = c2 = 0.0
                n0 = n1 = n2 = 0.0
                dsum = 0.0
                wsum = 0.0
                med = -1
                med_d = 0.0
                used = 0
                for o in order:
                    k = buf_k[o]
                    a = alpha[k] * buf_w[o]
                    b = a if trans_diffuse else alpha[k]
                    wn = a * T
                    la0 = buf_lam[o, 0]
                    la1 = buf_lam[o, 1]
                    la2 = buf_lam[o, 2]
                    c0 += wn * (la0 * col[k, 0, 0] + la1 * col[k, 1, 0] + la2 * col[k, 2, 0])
                    c1 += wn * (la0 * col[k, 0, 1] + la1 * col[k, 1, 1] + la2 * col[k, 2, 1])
                    c2 += wn * (la0 * col[k, 0, 2] + la1 * col[k, 1, 2] + la2 * col[k, 2, 2])
                    n0 += wn * nrm[k, 0]
                    n1 += wn * nrm[k, 1]
                    n2 += wn * nrm[k, 2]
                    dsum += wn * buf_d[o]
                    wsum += wn
                    Tn = T * (1.0 - b)
                    if med < 0 and Tn < 0.5:
                        med = k
                        med_d = buf_d[o]
                    T = Tn
                    used += 1
                    if T < t_min:
                        break
                out_color[py, px, 0] = c0 + T * bg[0]
                out_color[py, px, 1] = c1 + T * bg[1]
                out_color[py, px, 2] = c2 + T * bg[2]
                out_normal[py, px, 0] = n0
                out_normal[py, px, 1] = n1
                out_normal[py, px, 2] = n2
                if mean_mode:
                    out_depth[py, px] = dsum / wsum if wsum > 1e-6 else 0.0
                else:
                    out_depth[py, px] = med_d
                out_T[py, px] = T
                out_n[py, px] = used
                out_med[py, px] = med
                out_wsum[py, px] = wsum


@nb.njit(cache=True, parallel=True)
def _backward_kernel(offsets, ids, tiles_x, tile_w, tile_h, W, H, V, nrm, alpha, sigma, col,
                     fx, fy, cx, cy, R, C, near, alpha_min, t_min, trans_diffuse, mean_mode, bg, cull,
                     depth, wsum_img, gC_img, gD_img, gN_img, nchunks,
                     gV, gcol, galpha, gsigma, gnrm):
    ntiles = offsets.shape[0] - 1
    Ct = (C[0], C[1], C[2])
    per = (ntiles + nchunks - 1) // nchunks
    for ch in nb.prange(nchunks):
        for t in range(ch * per, min((ch + 1) * per, ntiles)):
            tyi = t // tiles_x
            txi = t - tyi * tiles_x
            tid = ids[offsets[t]:offsets[t + 1]]
            n = tid.shape[0]
            if n == 0:
                continue
            buf_k = np.empty(n, np.int64)
            buf_d = np.empty(n)
            buf_lam = np.empty((n, 3))
            buf_l = np.empty(n)
            buf_w = np.empty(n)
            buf_o = np.empty(n, np.int64)
            seq = np.empty(n, np.int64)
            Tseq = np.empty(n)
            for py in range(tyi * tile_h, min((tyi + 1) * tile_h, H)):
                for px in range(txi * tile_w, min((txi + 1) * tile_w, W)):
                    g0 = gC_img[py, px, 0]
                    g1 = gC_img[py, px, 1]
                    g2 = gC_img[py, px, 2]
                    gD = gD_img[py, px]
                    gn0 = gN_img[py, px, 0]
                    gn1 = gN_img[py, px, 1]
                    gn2 = gN_img[py, px, 2]
                    if g0 == 0.0 and g1 == 0.0 and g2 == 0.0 and gD == 0.0 and gn0 == 0.0 \
                            and gn1 == 0.0 and gn2 == 0.0:
                        continue
                    r = _pixel_ray(px, py, fx, fy, cx, cy, R)
                    cnt = _gather(tid, V, alpha, sigma, Ct, r, near, alpha_min, cull,
                                  buf_k, buf_d, buf_lam, buf_l, buf_w)
                    order = _stable_order(buf_d, cnt, np.empty(n, np.int64))
                    T = 1.0
                    used = 0
                    med_pos = -1
                    for o in order:
                        k = buf_k[o]
                        a = alpha[k] * buf_w[o]
                        b = a if trans_diffuse else alpha[k]
                        seq[used] = o
                        Tseq[used] = T
                        Tn = T * (1.0 - b)
                        if med_pos < 0 and Tn < 0.5:
                            med_pos = used
                        T = Tn
                        used += 1
                        if T < t_min:
                            break
                    gA = 0.0
                    gW = 0.0
                    if mean_mode:
                        ws = wsum_img[py, px]
                        if ws > 1e-6:
                            gA = gD / ws
                            gW = -gD * depth[py, px] / ws
                    Racc = g0 * bg[0] + g1 * bg[1] + g2 * bg[2]
                    for u in range(used - 1, -1, -1):
                        o = seq[u]
                        k = buf_k[o]
                        Tn_ = Tseq[u]
                        w = buf_w[o]
                        a = alpha[k] * w
                        b = a if trans_diffuse else alpha[k]
                        la0 = buf_lam[o, 0]
                        la1 = buf_lam[o, 1]
                        la2 = buf_lam[o, 2]
                        cc0 = la0 * col[k, 0, 0] + la1 * col[k, 1, 0] + la2 * col[k, 2, 0]
                        cc1 = la0 * col[k, 0, 1] + la1 * col[k, 1, 1] + la2 * col[k, 2, 1]
                        cc2 = la0 * col[k, 0, 2] + la1 * col[k, 1, 2] + la2 * col[k, 2, 2]
                        dn = buf_d[o]
                        phi = g0 * cc0 + g1 * cc1 + g2 * cc2 + gn0 * nrm[k, 0] + gn1 * nrm[k, 1] \
                            + gn2 * nrm[k, 2] + gA * dn + gW
                        ga = phi * Tn_
                        gb = -Tn_ * Racc
                        Racc = phi * a + (1.0 - b) * Racc
                        if trans_diffuse:
                            ga += gb
                        else:
                            galpha[ch, k] += gb
                        wn = a * Tn_
                        galpha[ch, k] += ga * w
                        gw = ga * alpha[k]
                        _, dwdl, dwds = diffuse_weight_kernel(buf_l[o], sigma[k])
                        gl = gw * dwdl
                        gsigma[ch, k] += gw * dwds
                        for j in range(3):
                            lj = buf_lam[o, j]
                            gcol[ch, k, j, 0] += wn * lj * g0
                            gcol[ch, k, j, 1] += wn * lj * g1
                            gcol[ch, k, j, 2] += wn * lj * g2
                        gl0 = wn * (g0 * col[k, 0, 0] + g1 * col[k, 0, 1] + g2 * col[k, 0, 2])
                        gl1 = wn * (g0 * col[k, 1, 0] + g1 * col[k, 1, 1] + g2 * col[k, 1, 2])
                        gl2 = wn * (g0 * col[k, 2, 0] + g1 * col[k, 2, 1] + g2 * col[k, 2, 2])
                        gnrm[ch, k, 0] += wn * gn0
                        gnrm[ch, k, 1] += wn * gn1
                        gnrm[ch, k, 2] += wn * gn2
                        gd = wn * gA
                        if (not mean_mode) and u == med_pos:
                            gd += gD
                        if gd != 0.0 or gl != 0.0 or gl0 != 0.0 or gl1 != 0.0 or gl2 != 0.0:
                            a0, a1, a2 = intersect_backward_kernel(
                                _v(V, k, 0), _v(V, k, 1), _v(V, k, 2), Ct, r, gd, gl0, gl1, gl2, gl)
                            for i in range(3):
                                gV[ch, k, 0, i] += a0[i]
                                gV[ch, k, 1, i] += a1[i]
                                gV[ch, k, 2, i] += a2[i]


# --------------------------------------------------------------- public API

def _kernel_args(p: Prepared, cam: Camera, st: RasterSettings, bins: Bins):
    tw = th = bins.tile_size
    if bins.tiles_x == 1 and bins.tiles_y == 1:
        tw, th = cam.width, cam.height
    return (bins.offsets, bins.ids, bins.tiles_x, tw, th, cam.width, cam.height,
            p.V, p.normal, p.alpha, p.sigma, p.colors, *_cam_args(cam), st.near,
            st.alpha_min, st.t_min, st.transmittance_uses_diffuse, st.depth_mode == "mean",
            np.asarray(st.background, dtype=np.float64), p.cull)


def render(soup: TriangleSoup, cam: Camera, settings: RasterSettings | None = None,
           mode: str | None = None, brute_force: bool = False) -> RenderOutput:
    st = settings or RasterSettings()
    if mode is not None and mode != st.depth_mode:
        st = RasterSettings(**{**st.__dict__, "depth_mode": mode})
    H, W = cam.height, cam.width
    p = prepare(soup, cam, st)
    bins = full_screen_bins(p, cam) if brute_force else tile_bin(p, cam, st)
    color = np.zeros((H, W, 3))
    depth = np.zeros((H, W))
    normal = np.zeros((H, W, 3))
    T = np.ones((H, W))
    ncon = np.zeros((H, W), np.int64)
    med = np.full((H, W), -1, np.int64)
    wsum = np.zeros((H, W))
    if soup.count == 0:
        color[:] = np.asarray(st.background, float)
    else:
        _render_kernel(*_kernel_args(p, cam, st, bins), color, depth, normal, T, ncon, med, wsum)
    return RenderOutput(color, depth, normal, T, ncon, med, wsum, cam, st, p, bins, soup)


@dataclass
class TriangleGrads:
    """Gradients of a scalar loss w.r.t. render inputs, one row per triangle."""
    vertices: np.ndarray
    colors: np.ndarray
    alpha: np.ndarray
    sigma: np.ndarray
    normal: np.ndarray


def render_backward_raw(out: RenderOutput, grad_color=None, grad_depth=None, grad_normal=None) -> TriangleGrads:
    cam, st, p, bins = out.camera, out.settings, out.prepared, out.bins
    H, W = cam.height, cam.width
    N = len(p.V)

    def _grad(g, shape):
        if g is None:
            return np.zeros(shape)
        g = np.ascontiguousarray(g, dtype=np.float64)
        if g.shape != shape:
            raise ValueError(f"gradient shape {g.shape} does not match render shape {shape}")
        return g

    gC = _grad(grad_color, (H, W, 3))
    gD = _grad(grad_depth, (H, W))
    gN = _grad(grad_normal, (H, W, 3))
    if st.deterministic:
        nchunks = max(1, int(st.reduce_chunks))
    else:
        nchunks = nb.get_num_threads()
    gV = np.zeros((nchunks, N, 3, 3))
    gcol = np.zeros((nchunks, N, 3, 3))
    ga = np.zeros((nchunks, N))
    gs = np.zeros((nchunks, N))
    gn = np.zeros((nchunks, N, 3))
    if N:
        _backward_kernel(*_kernel_args(p, cam, st, bins), out.depth, out.weight_sum, gC, gD, gN,
                         nchunks, gV, gcol, ga, gs, gn)

    def _reduce(a):
        acc = a[0].copy()
        for i in range(1, nchunks):
            acc += a[i]
        return acc

    return TriangleGrads(_reduce(gV), _reduce(gcol), _reduce(ga), _reduce(gs), _reduce(gn))


def normal_to_vertices_backward(V, flip, g_normal):
    """Map gradients on the camera-facing unit normals to vertex gradients."""
    a = V[:, 2] - V[:, 0]
    b = V[:, 1] - V[:, 0]
    Nv = np.cross(a, b)
    nN = np.linalg.norm(Nv, axis=-1, keepdims=True)
    nN = np.where(nN > 0, nN, np.inf)
    n = Nv / nN
    g = g_normal * flip[:, None]
    gNv = (g - n * np.sum(n * g, axis=-1, keepdims=True)) / nN
    ga = np.cross(b, gNv)
    gb = np.cross(gNv, a)
    gV = np.zeros_like(V)
    gV[:, 2] += ga
    gV[:, 1] += gb
    gV[:, 0] -= ga + gb
    return gV


def colors_backward(soup: TriangleSoup, p: Prepared, cam: Camera, st: RasterSettings, gcol):
    """Push vertex-colour gradients into SH coefficients and the view-direction anchors.

    Returns the gradient on the view anchors: (N,3) for mu, or (N,3,3) for
    vertices when per-vertex view directions are used.
    """
    deg = soup.active_sh_degree
    K = shmod.num_coeffs(deg)
    g = np.where(p.color_mask, gcol, 0.0)
    if st.per_vertex_view_dirs:
        soup.grad["sh"][:, :, :K] += np.einsum("njk,njc->njkc", p.basis, g)
    else:
        soup.grad["sh"][:, :, :K] += np.einsum("nk,njc->njkc", p.basis, g)
    if deg == 0:
        return np.zeros(p.view_dirs.shape)
    dirs = p.view_dirs.reshape(-1, 3)
    dY = _basis_grads(np.ascontiguousarray(dirs), deg).reshape(p.view_dirs.shape[:-1] + (K, 3))
    if st.per_vertex_view_dirs:
        gc = np.einsum("njkc,njc->njk", soup.sh[:, :, :K], g)
        gdir = np.einsum("njk,njka->nja", gc, dY)
    else:
        gc = np.einsum("njkc,njc->nk", soup.sh[:, :, :K], g)
        gdir = np.einsum("nk,nka->na", gc, dY)
    d = p.view_dirs
    return (gdir - d * np.sum(d * gdir, axis=-1, keepdims=True)) / p.view_len[..., None]


@nb.njit(cache=True)
def _basis_grads(dirs, degree):
    K = (degree + 1) ** 2
    out = np.zeros((dirs.shape[0], K, 3))
    for i in range(dirs.shape[0]):
        shmod.basis_grad(dirs[i, 0], dirs[i, 1], dirs[i, 2], degree, out[i])
    return out


def render_backward(out: RenderOutput, grad_color=None, grad_depth=None, grad_normal=None,
                    soup: TriangleSoup | None = None) -> TriangleGrads:
    """Accumulate parameter gradients into ``soup.grad`` (defaults to the rendered soup)."""
    soup = soup if soup is not None else out.soup
    if soup.count != len(out.prepared.V):
        raise ValueError("soup changed since render")
    tg = render_backward_raw(out, grad_color, grad_depth, grad_normal)
    p, st = out.prepared, out.settings
    gV = tg.vertices + normal_to_vertices_backward(p.V, p.flip, tg.normal)
    ganchor = colors_backward(soup, p, out.camera, st, tg.colors)
    if st.per_vertex_view_dirs:
        gV = gV + ganchor
    else:
        soup.grad["mu"] += ganchor
    soup.vertices_backward(gV)
    soup.activations_backward(tg.alpha, tg.sigma)
    return tg

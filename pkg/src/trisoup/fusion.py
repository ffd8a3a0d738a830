"""Multi-view depth fusion with pixel reprojection filtering."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .camera import Camera


@dataclass
class FusedCloud:
    points: np.ndarray
    colors: np.ndarray
    view_id: np.ndarray
    consistency: np.ndarray

    def __len__(self):
        return len(self.points)


def _neighbors(cams, ref, k):
    others = [i for i in range(len(cams)) if i != ref]
    if k is None or k >= len(others):
        return others
    c = cams[ref].center
    dist = [np.linalg.norm(cams[i].center - c) for i in others]
    return [others[i] for i in np.argsort(dist, kind="stable")[:k]]


def reprojection_errors(ref_cam: Camera, ref_depth: np.ndarray, src_cam: Camera, src_depth: np.ndarray,
                        rel_depth_thresh: float | None = None):
    """Per-pixel reference->source->reference reprojection error in pixels (inf if unusable)."""
    H, W = ref_depth.shape
    ys, xs = np.mgrid[0:H, 0:W]
    uv_ref = np.stack([xs + 0.5, ys + 0.5], axis=-1).astype(np.float64)
    z_ref = ref_cam.frame_depth_to_z(ref_depth)
    X = ref_cam.unproject(uv_ref, z_ref)
    uv_src, z_src = src_cam.project(X)
    err = np.full((H, W), np.inf)
    ok = (ref_depth > 0) & (z_src > 0) & np.all(np.isfinite(uv_src), axis=-1)
    ix = np.floor(np.where(ok, uv_src[..., 0], -1)).astype(np.int64)
    iy = np.floor(np.where(ok, uv_src[..., 1], -1)).astype(np.int64)
    ok &= (ix >= 0) & (ix < src_cam.width) & (iy >= 0) & (iy < src_cam.height)
    ixc = np.clip(ix, 0, src_cam.width - 1)
    iyc = np.clip(iy, 0, src_cam.height - 1)
    d_src = src_depth[iyc, ixc]
    ok &= d_src > 0
    zmap_src = src_cam.frame_depth_to_z(src_depth)
    Y = src_cam.unproject(uv_src, zmap_src[iyc, ixc])
    uv_back, z_back = ref_cam.project(Y)
    e = np.linalg.norm(uv_back - uv_ref, axis=-1)
    ok &= z_back > 0
    if rel_depth_thresh is not None:
        with np.errstate(divide="ignore", invalid="ignore"):
            ok &= np.abs(z_back - z_ref) / z_ref <= rel_depth_thresh
    err[ok] = e[ok]
    return err


def fuse_depth_maps(depths, cams, colors=None, px_thresh: float = 1.0, min_views: int = 3,
                    k_neighbors: int | None = None, rel_depth_thresh: float | None = None) -> FusedCloud:
    """Keep reference depths that reproject within ``px_thresh`` in >= ``min_views`` neighbours.

    ``depths`` are per-view ray-distance maps (0 = no surface) or RenderOutputs.
    """
    if depths and hasattr(depths[0], "depth"):
        if colors is None:
            colors = [r.color for r in depths]
        depths = [r.depth for r in depths]
    pts, cols, vid, cons = [], [], [], []
    for r, (cam, D) in enumerate(zip(cams, depths)):
        count = np.zeros(D.shape, np.int64)
        for s in _neighbors(cams, r, k_neighbors):
            err = reprojection_errors(cam, D, cams[s], depths[s], rel_depth_thresh)
            count += err <= px_thresh
        keep = (D > 0) & (count >= min_views)
        if not keep.any():
            continue
        ys, xs = np.nonzero(keep)
        uv = np.stack([xs + 0.5, ys + 0.5], axis=-1).astype(np.float64)
        z = cam.frame_depth_to_z(D)[ys, xs]
        pts.append(cam.unproject(uv, z))
        cols.append(colors[r][ys, xs] if colors is not None else np.zeros((len(ys), 3)))
        vid.append(np.full(len(ys), r, np.int64))
        cons.append(count[ys, xs])
    if not pts:
        return FusedCloud(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros(0, np.int64), np.zeros(0, np.int64))
    return FusedCloud(np.concatenate(pts), np.concatenate(cols), np.concatenate(vid), np.concatenate(cons))

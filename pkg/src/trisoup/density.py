"""Population control: 4-way splits, clones, pruning and opacity resets."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .geometry import EPS_AREA
from .soup import PARAMS, TriangleSoup, circumradius, logit, quat_multiply

log = logging.getLogger(__name__)

# rotation by pi about the local normal axis (wxyz)
_QZ_PI = np.array([0.0, 0.0, 0.0, 1.0])


@dataclass
class DensifyStats:
    max_grad: np.ndarray      # max |dL/dmu| since the last densify
    grad_dir: np.ndarray      # dL/dmu at that maximum
    max_extent: np.ndarray    # max projected extent in pixels
    iterations: int = 0

    @classmethod
    def zeros(cls, n: int) -> "DensifyStats":
        return cls(np.zeros(n), np.zeros((n, 3)), np.zeros(n), 0)

    def __len__(self):
        return len(self.max_grad)

    def reset(self, n: int | None = None):
        n = len(self) if n is None else n
        self.max_grad = np.zeros(n)
        self.grad_dir = np.zeros((n, 3))
        self.max_extent = np.zeros(n)
        self.iterations = 0


def accumulate_stats(stats: DensifyStats, grad_mu: np.ndarray, extents: np.ndarray | None = None) -> DensifyStats:
    """Elementwise max of |dL/dmu| (and screen extent) into the running stats."""
    grad_mu = np.asarray(grad_mu, float)
    if grad_mu.ndim == 1:
        mags = grad_mu
        vecs = None
    else:
        mags = np.linalg.norm(grad_mu, axis=-1)
        vecs = grad_mu
    if len(mags) != len(stats):
        raise ValueError(f"stats length {len(stats)} != gradient length {len(mags)}")
    upd = mags > stats.max_grad
    stats.max_grad = np.where(upd, mags, stats.max_grad)
    if vecs is not None:
        stats.grad_dir = np.where(upd[:, None], vecs, stats.grad_dir)
    if extents is not None:
        if len(extents) != len(stats):
            raise ValueError("extent length mismatch")
        stats.max_extent = np.maximum(stats.max_extent, extents)
    stats.iterations += 1
    return stats


@dataclass
class DensifyConfig:
    grad_threshold: float = 7.5e-5
    split_size: float | None = None   # None -> soup.split_size
    clone_jitter: float = 0.1
    prune_alpha: float = 0.005
    eps_area: float = EPS_AREA
    max_triangles: int | None = None


def split_children(soup: TriangleSoup, idx: np.ndarray) -> TriangleSoup:
    """Four children per parent at the edge midpoints.

    Corner children are the parent shrunk by 1/2 about a corner; the centre
    child is the parent scaled by -1/2 about its barycentre, i.e. half size and
    rotated by pi about the normal. Both map the canonical layout exactly.
    """
    idx = np.asarray(idx, dtype=np.int64)
    m = len(idx)
    mu = soup.mu[idx]
    V = soup.vertices()[idx]
    G = V.mean(axis=1)
    sh = soup.sh[idx]
    q = soup.quat[idx]
    half = soup.scale_raw[idx] - np.log(2.0)

    mus, shs, qs = [], [], []
    for j in range(3):
        mus.append(V[:, j] + 0.5 * (mu - V[:, j]))
        qs.append(q)
        child = np.empty_like(sh)
        for i in range(3):
            child[:, i] = sh[:, j] if i == j else 0.5 * (sh[:, j] + sh[:, i])
        shs.append(child)
    mus.append(G - 0.5 * (mu - G))
    qs.append(quat_multiply(q, np.broadcast_to(_QZ_PI, q.shape)))
    centre = np.empty_like(sh)
    for i in range(3):
        a, b = [j for j in range(3) if j != i]
        centre[:, i] = 0.5 * (sh[:, a] + sh[:, b])
    shs.append(centre)

    out = TriangleSoup(
        np.concatenate(mus), np.concatenate(shs), np.tile(half, (4, 1)), np.concatenate(qs),
        np.tile(soup.opacity_raw[idx], 4), np.tile(soup.sigma_raw[idx], 4),
        active_sh_degree=soup.active_sh_degree,
    )
    assert out.count == 4 * m
    return out


def clone_children(soup: TriangleSoup, idx: np.ndarray, grad_dir: np.ndarray, jitter: float) -> TriangleSoup:
    """Copies moved against the accumulated mu gradient; optimiser moments copied."""
    out = soup.subset(idx)
    r = circumradius(out.vertices())
    g = np.asarray(grad_dir, float)
    gn = np.linalg.norm(g, axis=-1, keepdims=True)
    step = np.where(gn > 0, -g / np.where(gn > 0, gn, 1.0), 0.0)
    out.mu = out.mu + jitter * np.where(np.isfinite(r), r, 0.0)[:, None] * step
    for k in PARAMS:
        out.grad[k].fill(0.0)
    return out


def densify_and_prune(soup: TriangleSoup, stats: DensifyStats, cfg: DensifyConfig | None = None) -> dict:
    """Split large / clone small high-gradient triangles, then prune. Mutates soup and stats."""
    cfg = cfg or DensifyConfig()
    n0 = soup.count
    if len(stats) != n0:
        raise ValueError("densify stats out of sync with soup")
    split_size = soup.split_size if cfg.split_size is None else cfg.split_size
    r = circumradius(soup.vertices())
    hot = stats.max_grad > cfg.grad_threshold
    if cfg.max_triangles is not None:
        room = max(0, cfg.max_triangles - n0)
        # each split adds 3, each clone adds 1; keep the largest gradients first
        order = np.argsort(-stats.max_grad, kind="stable")
        keep_hot = np.zeros(n0, bool)
        budget = room
        for i in order:
            if not hot[i]:
                break
            cost = 3 if r[i] > split_size else 1
            if cost > budget:
                continue
            keep_hot[i] = True
            budget -= cost
        hot = keep_hot
    split = np.nonzero(hot & (r > split_size))[0]
    clone = np.nonzero(hot & ~(r > split_size))[0]
    kids = split_children(soup, split) if len(split) else None
    clones = clone_children(soup, clone, stats.grad_dir[clone], cfg.clone_jitter) if len(clone) else None
    keep = np.ones(n0, bool)
    keep[split] = False
    soup.keep(keep)
    if clones is not None:
        soup.extend(clones)
    if kids is not None:
        soup.extend(kids)
    pruned = prune(soup, cfg.prune_alpha, cfg.eps_area)
    stats.reset(soup.count)
    soup.check_lockstep()
    info = dict(split=int(len(split)), cloned=int(len(clone)), pruned=int(pruned), count=soup.count)
    log.info("densify split=%d cloned=%d pruned=%d count=%d", *info.values())
    return info


def prune(soup: TriangleSoup, prune_alpha: float = 0.005, eps_area: float = EPS_AREA) -> int:
    dead = (soup.alpha < prune_alpha) | soup.degenerate(eps_area)
    if dead.any():
        soup.keep(~dead)
    return int(dead.sum())


def reset_opacity(soup: TriangleSoup, value: float = 0.1, exact: bool = False):
    """Clamp activated opacity down to ``value`` (or set it exactly); clears opacity moments."""
    target = float(logit(value))
    if exact:
        soup.opacity_raw[:] = target
    else:
        np.minimum(soup.opacity_raw, target, out=soup.opacity_raw)
    soup.exp_avg["opacity_raw"].fill(0.0)
    soup.exp_avg_sq["opacity_raw"].fill(0.0)

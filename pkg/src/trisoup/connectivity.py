"""Soft edge-to-edge connections between triangles.

Every triangle edge is connected to the nearest admissible edge of another
triangle (by midpoint distance, within a search radius). Admissibility uses
the in-plane outward unit vectors of both edges and the unit vector joining
their midpoints:

* direction:   outward_a . g  > tau    (the neighbour lies outside edge a)
* orientation: outward_a . outward_b < -rho   (the edges face each other)
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numba as nb
import numpy as np

from .soup import TriangleSoup, circumradius

EDGE_VERTS = np.array([[0, 1], [1, 2], [2, 0]])
_COINCIDENT = 1e-12


@dataclass
class EdgeRef:
    tri: int
    edge: int
    midpoint: np.ndarray
    outward: np.ndarray
    direction: np.ndarray = None


@dataclass
class EdgeData:
    """Cached per-edge geometry, edge e = 3 * tri + k."""
    midpoint: np.ndarray   # (E,3)
    outward: np.ndarray    # (E,3)
    direction: np.ndarray  # (E,3) unit edge vector
    endpoints: np.ndarray  # (E,2,3)
    radius: np.ndarray     # (E,) search radius

    def ref(self, e: int) -> EdgeRef:
        return EdgeRef(e // 3, e % 3, self.midpoint[e], self.outward[e], self.direction[e])


def edge_data(V: np.ndarray, search_radius_factor: float = 3.0) -> EdgeData:
    V = np.asarray(V, float)
    n = len(V)
    A = V[:, EDGE_VERTS[:, 0]]
    B = V[:, EDGE_VERTS[:, 1]]
    mid = 0.5 * (A + B)
    e = B - A
    e = e / np.maximum(np.linalg.norm(e, axis=-1, keepdims=True), 1e-300)
    nrm = np.cross(V[:, 2] - V[:, 0], V[:, 1] - V[:, 0])
    nrm = nrm / np.maximum(np.linalg.norm(nrm, axis=-1, keepdims=True), 1e-300)
    o = np.cross(e, nrm[:, None, :])
    o = o / np.maximum(np.linalg.norm(o, axis=-1, keepdims=True), 1e-300)
    bc = V.mean(axis=1)
    sgn = np.where(np.sum(o * (mid - bc[:, None]), axis=-1) < 0, -1.0, 1.0)
    o = o * sgn[..., None]
    rad = np.repeat(search_radius_factor * circumradius(V), 3) if n else np.zeros(0)
    return EdgeData(mid.reshape(-1, 3), o.reshape(-1, 3), e.reshape(-1, 3),
                    np.stack([A, B], axis=2).reshape(-1, 2, 3), rad)


def admissible(a: EdgeRef, b: EdgeRef, tau: float = 0.0, rho: float = 0.0, criteria: str = "outward") -> bool:
    """Direction and orientation test for connecting edge a to edge b.

    Coincident midpoints pass the direction test: the edges already touch.
    ``criteria="edge"`` uses the edge direction vectors instead of the outward
    vectors for both tests.
    """
    g = np.asarray(b.midpoint, float) - np.asarray(a.midpoint, float)
    ng = np.linalg.norm(g)
    if criteria == "edge":
        va, vb = a.direction, b.direction
    else:
        va, vb = a.outward, b.outward
    direction_ok = ng < _COINCIDENT or float(np.dot(va, g / ng)) > tau
    return bool(direction_ok and float(np.dot(va, vb)) < -rho)


@dataclass
class EdgeGraph:
    tri_a: np.ndarray
    edge_a: np.ndarray
    tri_b: np.ndarray
    edge_b: np.ndarray
    reversed: np.ndarray
    count: int
    stamp: int = 0
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.tri_a)

    @classmethod
    def empty(cls, count: int = 0, stamp: int = 0) -> "EdgeGraph":
        z = np.zeros(0, np.int64)
        return cls(z, z, z, z, np.zeros(0, bool), count, stamp)

    def pairs(self) -> set:
        return {(int(a) * 3 + int(ea), int(b) * 3 + int(eb))
                for a, ea, b, eb in zip(self.tri_a, self.edge_a, self.tri_b, self.edge_b)}

    def check(self, soup: TriangleSoup):
        if self.count != soup.count:
            raise ValueError(f"stale edge graph: built for {self.count} triangles, soup has {soup.count}")


@nb.njit(cache=True)
def _admit(ma, oa, mb, ob, tau, rho):
    gx = mb[0] - ma[0]
    gy = mb[1] - ma[1]
    gz = mb[2] - ma[2]
    ng = np.sqrt(gx * gx + gy * gy + gz * gz)
    if ng >= _COINCIDENT:
        if (oa[0] * gx + oa[1] * gy + oa[2] * gz) / ng <= tau:
            return False
    return oa[0] * ob[0] + oa[1] * ob[1] + oa[2] * ob[2] < -rho


@nb.njit(cache=True)
def _hash_search(mid, vec, radius, active, cell, tau, rho):
    E = mid.shape[0]
    off = 1 << 20
    base = 1 << 21
    ci = np.zeros((E, 3), np.int64)
    keys = np.full(E, np.iinfo(np.int64).max, np.int64)
    for e in range(E):
        if not active[e]:
            continue
        for a in range(3):
            ci[e, a] = np.int64(np.floor(mid[e, a] / cell))
        keys[e] = ((ci[e, 0] + off) * base + (ci[e, 1] + off)) * base + (ci[e, 2] + off)
    order = np.argsort(keys, kind="mergesort")
    skeys = keys[order]
    best = np.full(E, -1, np.int64)
    for a in range(E):
        ta = a // 3
        ra = radius[a]
        if not (active[a] and ra > 0):
            continue
        rings = np.int64(np.ceil(ra / cell))
        bd = np.inf
        bb = -1
        for dx in range(-rings, rings + 1):
            for dy in range(-rings, rings + 1):
                for dz in range(-rings, rings + 1):
                    key = ((ci[a, 0] + dx + off) * base + (ci[a, 1] + dy + off)) * base + (ci[a, 2] + dz + off)
                    lo = np.searchsorted(skeys, key, side="left")
                    hi = np.searchsorted(skeys, key, side="right")
                    for s in range(lo, hi):
                        b = order[s]
                        if b // 3 == ta:
                            continue
                        d = np.sqrt((mid[b, 0] - mid[a, 0]) ** 2 + (mid[b, 1] - mid[a, 1]) ** 2
                                    + (mid[b, 2] - mid[a, 2]) ** 2)
                        if d > ra:
                            continue
                        if d < bd or (d == bd and b < bb):
                            if _admit(mid[a], vec[a], mid[b], vec[b], tau, rho):
                                bd = d
                                bb = b
        best[a] = bb
    return best


def _pairing_reversed(ed: EdgeData, a, b):
    A = ed.endpoints[a]
    B = ed.endpoints[b]
    straight = np.linalg.norm(A[:, 0] - B[:, 0], axis=-1) + np.linalg.norm(A[:, 1] - B[:, 1], axis=-1)
    swapped = np.linalg.norm(A[:, 0] - B[:, 1], axis=-1) + np.linalg.norm(A[:, 1] - B[:, 0], axis=-1)
    return swapped < straight


def _graph_from_best(ed: EdgeData, best, count, stamp):
    a = np.nonzero(best >= 0)[0]
    b = best[a]
    return EdgeGraph(a // 3, a % 3, b // 3, b % 3, _pairing_reversed(ed, a, b), count, stamp)


def build_graph(soup: TriangleSoup, tau: float = 0.0, rho: float = 0.0, search_radius_factor: float = 3.0,
                stamp: int = 0, criteria: str = "outward", exclude=None) -> EdgeGraph:
    """Nearest admissible foreign edge for every edge, via a uniform hash grid.

    ``exclude`` optionally masks triangles (e.g. degenerate ones) out of the graph.
    """
    V = soup.vertices() if isinstance(soup, TriangleSoup) else np.asarray(soup)
    n = len(V)
    if n == 0:
        return EdgeGraph.empty(0, stamp)
    ed = edge_data(V, search_radius_factor)
    radius = ed.radius.copy()
    bad = ~np.isfinite(radius)
    if exclude is not None:
        bad |= np.repeat(np.asarray(exclude, bool), 3)
    radius[bad] = 0.0
    active = ~bad & np.all(np.isfinite(ed.midpoint), axis=1)
    pos = radius[radius > 0]
    if len(pos) == 0:
        return EdgeGraph.empty(n, stamp)
    cell = float(np.median(pos))
    vec = ed.direction if criteria == "edge" else ed.outward
    mid = np.where(active[:, None], ed.midpoint, 0.0)
    best = _hash_search(np.ascontiguousarray(mid), np.ascontiguousarray(vec), radius, active, cell,
                        float(tau), float(rho))
    return _graph_from_best(ed, best, n, stamp)


def build_graph_brute_force(soup, tau=0.0, rho=0.0, search_radius_factor=3.0, criteria="outward") -> EdgeGraph:
    """O(E^2) reference assignment; vectorised admissibility, same tie-breaking."""
    V = soup.vertices() if isinstance(soup, TriangleSoup) else np.asarray(soup)
    n = len(V)
    if n == 0:
        return EdgeGraph.empty(0)
    ed = edge_data(V, search_radius_factor)
    adm = admissibility_matrix(ed, tau, rho, criteria)
    D = np.linalg.norm(ed.midpoint[:, None] - ed.midpoint[None], axis=-1)
    tri = np.arange(3 * n) // 3
    ok = adm & (tri[:, None] != tri[None]) & (D <= ed.radius[:, None])
    D = np.where(ok, D, np.inf)
    best = np.where(np.isfinite(D.min(axis=1)), np.argmin(D, axis=1), -1)
    return _graph_from_best(ed, best, n, 0)


def admissibility_matrix(ed: EdgeData, tau=0.0, rho=0.0, criteria="outward") -> np.ndarray:
    vec = ed.direction if criteria == "edge" else ed.outward
    G = ed.midpoint[None] - ed.midpoint[:, None]
    nG = np.linalg.norm(G, axis=-1)
    with np.errstate(invalid="ignore", divide="ignore"):
        proj = np.einsum("ac,abc->ab", vec, G) / nG
    direction = (nG < _COINCIDENT) | (proj > tau)
    orientation = vec @ vec.T < -rho
    return direction & orientation


def export_polylines(path, soup: TriangleSoup, graph: EdgeGraph):
    """Write connections as OBJ line segments between paired edge midpoints."""
    ed = edge_data(soup.vertices())
    a = graph.tri_a * 3 + graph.edge_a
    b = graph.tri_b * 3 + graph.edge_b
    with open(path, "w") as f:
        f.write(f"# {len(graph)} edge connections\n")
        for i, (ea, eb) in enumerate(zip(a, b)):
            pa, pb = ed.midpoint[ea], ed.midpoint[eb]
            f.write(f"v {pa[0]:.9g} {pa[1]:.9g} {pa[2]:.9g}\nv {pb[0]:.9g} {pb[1]:.9g} {pb[2]:.9g}\n")
            f.write(f"l {2 * i + 1} {2 * i + 2}\n")

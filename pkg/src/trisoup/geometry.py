"""Per-ray, per-triangle closed-form kernels and their reverse-mode derivatives.

The jitted kernels work on 3-tuples so they can be inlined into the
rasterizer loops. The dataclass wrappers at the bottom are the convenient
entry points for everything else.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numba as nb
import numpy as np

EPS_PARALLEL = 1e-9
EPS_AREA = 1e-12
NEAR = 0.01
SIGMOID_CLAMP = 60.0


# ---------------------------------------------------------------- tuple math

@nb.njit(inline="always")
def add(a, b):
    return (a[0] + b[0], a[1] + b[1], a[2] + b[2])


@nb.njit(inline="always")
def sub(a, b):
    return (a[0] - b[0], a[1] - b[1], a[2] - b[2])


@nb.njit(inline="always")
def scale(a, s):
    return (a[0] * s, a[1] * s, a[2] * s)


@nb.njit(inline="always")
def dot(a, b):
    return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]


@nb.njit(inline="always")
def cross(a, b):
    return (a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0])


@nb.njit(inline="always")
def axpy(s, a, y):
    return (y[0] + s * a[0], y[1] + s * a[1], y[2] + s * a[2])


ZERO3 = (0.0, 0.0, 0.0)


# ------------------------------------------------------------------- kernels

@nb.njit(cache=True)
def _signed_edge_distance(v0, v1, v2, P, a0, a1, a2, nM):
    """Signed in-plane distance of P to the triangle boundary (positive inside).

    Returns (l, branch, edge, t): branch 0 = inside (edge = nearest edge line),
    branch 1 = outside (edge = nearest segment, t = clamped projection).
    Edge k is the one opposite vertex k.
    """
    if a0 >= 0.0 and a1 >= 0.0 and a2 >= 0.0:
        e0 = math.sqrt(dot(sub(v2, v1), sub(v2, v1)))
        e1 = math.sqrt(dot(sub(v0, v2), sub(v0, v2)))
        e2 = math.sqrt(dot(sub(v1, v0), sub(v1, v0)))
        h0 = a0 / (nM * e0)
        h1 = a1 / (nM * e1)
        h2 = a2 / (nM * e2)
        if h0 <= h1 and h0 <= h2:
            return h0, 0, 0, 0.0
        if h1 <= h2:
            return h1, 0, 1, 0.0
        return h2, 0, 2, 0.0
    best = np.inf
    best_k = 0
    best_t = 0.0
    for k in range(3):
        if k == 0:
            A, B = v1, v2
        elif k == 1:
            A, B = v2, v0
        else:
            A, B = v0, v1
        AB = sub(B, A)
        t = dot(sub(P, A), AB) / dot(AB, AB)
        t = min(max(t, 0.0), 1.0)
        Q = axpy(t, AB, A)
        dist = math.sqrt(dot(sub(P, Q), sub(P, Q)))
        if dist < best:
            best = dist
            best_k = k
            best_t = t
    return -best, 1, best_k, best_t


@nb.njit(cache=True)
def intersect_kernel(v0, v1, v2, C, r, near):
    """Ray/triangle intersection.

    Returns (valid, d, lam0, lam1, lam2, l). Depth is measured along the unit
    ray from the camera centre to the plane through the barycentre.
    """
    e1 = sub(v1, v0)
    e2 = sub(v2, v0)
    M = cross(e1, e2)
    MM = dot(M, M)
    if MM < 4.0 * EPS_AREA * EPS_AREA:
        return False, 0.0, 0.0, 0.0, 0.0, 0.0
    nM = math.sqrt(MM)
    den = dot(M, r)
    if abs(den) < EPS_PARALLEL * nM:
        return False, 0.0, 0.0, 0.0, 0.0, 0.0
    B = scale(add(add(v0, v1), v2), 1.0 / 3.0)
    d = dot(M, sub(B, C)) / den
    if not d > near:
        return False, d, 0.0, 0.0, 0.0, 0.0
    P = axpy(d, r, C)
    a0 = dot(M, cross(sub(v2, v1), sub(P, v1)))
    a1 = dot(M, cross(sub(v0, v2), sub(P, v2)))
    a2 = dot(M, cross(e1, sub(P, v0)))
    l, _, _, _ = _signed_edge_distance(v0, v1, v2, P, a0, a1, a2, nM)
    return True, d, a0 / MM, a1 / MM, a2 / MM, l


@nb.njit(cache=True)
def intersect_backward_kernel(v0, v1, v2, C, r, gd, gl0, gl1, gl2, gl):
    """Vertex gradients of an intersection given upstream grads on (d, lambda, l)."""
    e1 = sub(v1, v0)
    e2 = sub(v2, v0)
    M = cross(e1, e2)
    MM = dot(M, M)
    nM = math.sqrt(MM)
    den = dot(M, r)
    B = scale(add(add(v0, v1), v2), 1.0 / 3.0)
    BC = sub(B, C)
    num = dot(M, BC)
    d = num / den
    P = axpy(d, r, C)
    X0 = sub(v2, v1)
    Y0 = sub(P, v1)
    Z0 = cross(X0, Y0)
    X1 = sub(v0, v2)
    Y1 = sub(P, v2)
    Z1 = cross(X1, Y1)
    X2 = e1
    Y2 = sub(P, v0)
    Z2 = cross(X2, Y2)
    a0 = dot(M, Z0)
    a1 = dot(M, Z1)
    a2 = dot(M, Z2)

    gv0 = ZERO3
    gv1 = ZERO3
    gv2 = ZERO3
    gP = ZERO3
    gM = ZERO3
    ga0 = gl0 / MM
    ga1 = gl1 / MM
    ga2 = gl2 / MM
    gMM = -(gl0 * a0 + gl1 * a1 + gl2 * a2) / (MM * MM)

    if gl != 0.0:
        l, branch, k, t = _signed_edge_distance(v0, v1, v2, P, a0, a1, a2, nM)
        if branch == 0:
            if k == 0:
                E = X0
                ak = a0
            elif k == 1:
                E = X1
                ak = a1
            else:
                E = X2
                ak = a2
            nE = math.sqrt(dot(E, E))
            gak = gl / (nM * nE)
            if k == 0:
                ga0 += gak
            elif k == 1:
                ga1 += gak
            else:
                ga2 += gak
            gnM = -gl * l / nM
            gnE = -gl * l / nE
            gM = axpy(gnM / nM, M, gM)
            gE = scale(E, gnE / nE)
            # E = B_end - A_end for edge k opposite vertex k
            if k == 0:
                gv2 = add(gv2, gE)
                gv1 = sub(gv1, gE)
            elif k == 1:
                gv0 = add(gv0, gE)
                gv2 = sub(gv2, gE)
            else:
                gv1 = add(gv1, gE)
                gv0 = sub(gv0, gE)
        else:
            if k == 0:
                A, Bv = v1, v2
            elif k == 1:
                A, Bv = v2, v0
            else:
                A, Bv = v0, v1
            Q = axpy(t, sub(Bv, A), A)
            dist = -l
            if dist > 0.0:
                u = scale(sub(P, Q), 1.0 / dist)
                gdist = -gl
                gP = axpy(gdist, u, gP)
                gQ = scale(u, -gdist)
                gA = scale(gQ, 1.0 - t)
                gB = scale(gQ, t)
                if k == 0:
                    gv1 = add(gv1, gA)
                    gv2 = add(gv2, gB)
                elif k == 1:
                    gv2 = add(gv2, gA)
                    gv0 = add(gv0, gB)
                else:
                    gv0 = add(gv0, gA)
                    gv1 = add(gv1, gB)

    gM = axpy(2.0 * gMM, M, gM)
    # a_j = M . (X_j x Y_j)
    gM = axpy(ga0, Z0, gM)
    gZ = scale(M, ga0)
    gX = cross(Y0, gZ)
    gY = cross(gZ, X0)
    gv2 = add(gv2, gX)
    gv1 = sub(gv1, gX)
    gP = add(gP, gY)
    gv1 = sub(gv1, gY)

    gM = axpy(ga1, Z1, gM)
    gZ = scale(M, ga1)
    gX = cross(Y1, gZ)
    gY = cross(gZ, X1)
    gv0 = add(gv0, gX)
    gv2 = sub(gv2, gX)
    gP = add(gP, gY)
    gv2 = sub(gv2, gY)

    gM = axpy(ga2, Z2, gM)
    gZ = scale(M, ga2)
    gX = cross(Y2, gZ)
    gY = cross(gZ, X2)
    gv1 = add(gv1, gX)
    gv0 = sub(gv0, gX)
    gP = add(gP, gY)
    gv0 = sub(gv0, gY)

    gdt = gd + dot(gP, r)
    gnum = gdt / den
    gden = -gdt * d / den
    gM = axpy(gnum, BC, gM)
    gM = axpy(gden, r, gM)
    gB = scale(M, gnum / 3.0)
    gv0 = add(gv0, gB)
    gv1 = add(gv1, gB)
    gv2 = add(gv2, gB)

    ge1 = cross(e2, gM)
    ge2 = cross(gM, e1)
    gv1 = add(gv1, ge1)
    gv2 = add(gv2, ge2)
    gv0 = sub(gv0, add(ge1, ge2))
    return gv0, gv1, gv2


@nb.njit(cache=True)
def diffuse_weight_kernel(l, sigma):
    """Returns (w, dw/dl, dw/dsigma). Symmetric: w(-l) == 1 - w(l) bitwise."""
    x = sigma * l
    clamped = False
    if x > SIGMOID_CLAMP:
        x = SIGMOID_CLAMP
        clamped = True
    elif x < -SIGMOID_CLAMP:
        x = -SIGMOID_CLAMP
        clamped = True
    e = math.exp(-abs(x))
    if x >= 0.0:
        w = 1.0 / (1.0 + e)
    else:
        w = 1.0 - 1.0 / (1.0 + e)
    if clamped:
        return w, 0.0, 0.0
    dw = e / ((1.0 + e) * (1.0 + e))
    return w, sigma * dw, l * dw


@nb.njit(cache=True)
def normal_backward(M, g):
    """Gradient w.r.t. M of n = M / |M| given upstream g on n."""
    nM = math.sqrt(dot(M, M))
    n = scale(M, 1.0 / nM)
    return scale(sub(g, scale(n, dot(n, g))), 1.0 / nM)


# ------------------------------------------------------------ public wrappers

@dataclass
class Ray:
    origin: np.ndarray
    dir: np.ndarray

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=np.float64)
        d = np.asarray(self.dir, dtype=np.float64)
        n = np.linalg.norm(d)
        if n == 0 or not np.isfinite(n):
            raise ValueError("ray direction must be a finite non-zero vector")
        self.dir = d / n


@dataclass
class VertexLayout:
    vertices: np.ndarray      # (3, 3), row j is V^j
    normal: np.ndarray        # unit, (V0V2 x V0V1) / |.|
    barycenter: np.ndarray
    degenerate: bool = False

    @classmethod
    def from_vertices(cls, V, eps_area: float = EPS_AREA) -> "VertexLayout":
        V = np.asarray(V, dtype=np.float64).reshape(3, 3)
        N = np.cross(V[2] - V[0], V[1] - V[0])
        nN = np.linalg.norm(N)
        degenerate = bool(0.5 * nN < eps_area)
        n = N / nN if nN > 0 else np.zeros(3)
        return cls(V, n, V.mean(axis=0), degenerate)

    @property
    def area(self) -> float:
        V = self.vertices
        return 0.5 * float(np.linalg.norm(np.cross(V[1] - V[0], V[2] - V[0])))


@dataclass
class Intersection:
    depth: float
    point: np.ndarray
    lam: np.ndarray
    signed_edge_dist: float
    valid: bool


def _t(a):
    return (float(a[0]), float(a[1]), float(a[2]))


def intersect(ray: Ray, tri: VertexLayout, near: float = NEAR) -> Intersection:
    V = tri.vertices
    if tri.degenerate:
        return Intersection(0.0, np.zeros(3), np.zeros(3), 0.0, False)
    ok, d, l0, l1, l2, l = intersect_kernel(_t(V[0]), _t(V[1]), _t(V[2]), _t(ray.origin), _t(ray.dir), near)
    if not ok:
        return Intersection(float(d), np.zeros(3), np.zeros(3), 0.0, False)
    return Intersection(d, ray.origin + ray.dir * d, np.array([l0, l1, l2]), l, True)


def intersect_backward(ray: Ray, tri: VertexLayout, g_depth=0.0, g_lam=(0.0, 0.0, 0.0), g_l=0.0) -> np.ndarray:
    """Gradient of the intersection outputs w.r.t. the three vertices, (3, 3)."""
    V = tri.vertices
    g = intersect_backward_kernel(_t(V[0]), _t(V[1]), _t(V[2]), _t(ray.origin), _t(ray.dir),
                                  float(g_depth), float(g_lam[0]), float(g_lam[1]), float(g_lam[2]), float(g_l))
    return np.array(g)


def diffuse_weight(l, sigma):
    """w = 1 / (1 + exp(-sigma * l)); -> 1 inside the triangle, -> 0 outside."""
    if np.ndim(l) == 0 and np.ndim(sigma) == 0:
        if sigma <= 0:
            raise ValueError("sigma must be positive")
        return diffuse_weight_kernel(float(l), float(sigma))[0]
    lb, sb = np.broadcast_arrays(np.asarray(l, float), np.asarray(sigma, float))
    out = np.empty(lb.shape)
    for idx in np.ndindex(lb.shape):
        out[idx] = diffuse_weight_kernel(lb[idx], sb[idx])[0]
    return out


def diffuse_weight_grad(l: float, sigma: float) -> tuple[float, float]:
    _, dl, ds = diffuse_weight_kernel(float(l), float(sigma))
    return dl, ds


def interpolate_color(c0, c1, c2, lam) -> np.ndarray:
    lam = np.asarray(lam, dtype=np.float64)
    return lam[0] * np.asarray(c0, float) + lam[1] * np.asarray(c1, float) + lam[2] * np.asarray(c2, float)

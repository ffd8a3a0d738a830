import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from trisoup.geometry import (Ray, VertexLayout, diffuse_weight, diffuse_weight_grad, intersect,
                              intersect_backward, interpolate_color)


def linear_oracle(V, C, r):
    """Solve C + d r = V0 + u (V1 - V0) + v (V2 - V0) directly."""
    A = np.stack([r, V[0] - V[1], V[0] - V[2]], axis=1)
    d, u, v = np.linalg.solve(A, V[0] - C)
    return d, np.array([1 - u - v, u, v])


def seg_dist(P, A, B):
    t = np.clip(np.dot(P - A, B - A) / np.dot(B - A, B - A), 0, 1)
    return np.linalg.norm(P - (A + t * (B - A)))


def signed_dist_oracle(V, P, lam):
    d = min(seg_dist(P, V[1], V[2]), seg_dist(P, V[2], V[0]), seg_dist(P, V[0], V[1]))
    return d if np.all(lam >= 0) else -d


def random_query(rng):
    V = rng.normal(size=(3, 3))
    C = rng.normal(size=3) * 3 + np.array([0, 0, 6.0])
    target = V.mean(axis=0) + rng.normal(size=3) * 0.7
    return V, C, target - C


def test_intersection_matches_linear_system(rng):
    worst_d = worst_l = worst_s = 0.0
    n = 0
    while n < 2000:
        V, C, r = random_query(rng)
        ray = Ray(C, r)
        hit = intersect(ray, VertexLayout.from_vertices(V), near=-np.inf)
        if not hit.valid:
            continue
        d, lam = linear_oracle(V, C, ray.dir)
        worst_d = max(worst_d, abs(hit.depth - d) / max(1.0, abs(d)))
        worst_l = max(worst_l, np.abs(hit.lam - lam).max())
        worst_s = max(worst_s, abs(hit.signed_edge_dist - signed_dist_oracle(V, hit.point, lam)))
        n += 1
    assert worst_d < 1e-9 and worst_l < 1e-9 and worst_s < 1e-9


def test_hit_point_and_barycentric_sum(rng):
    V, C, r = random_query(rng)
    hit = intersect(Ray(C, r), VertexLayout.from_vertices(V))
    assert hit.lam.sum() == pytest.approx(1.0, abs=1e-12)
    np.testing.assert_allclose(hit.lam @ V, hit.point, atol=1e-10)


def test_parallel_and_behind_rejected():
    V = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0.0]])
    tri = VertexLayout.from_vertices(V)
    assert not intersect(Ray([0, 0, 1], [1, 0, 0]), tri).valid
    assert not intersect(Ray([0.2, 0.2, 1], [0, 0, 1]), tri).valid
    assert intersect(Ray([0.2, 0.2, 1], [0, 0, -1]), tri).valid


def test_degenerate_flag():
    V = np.array([[0, 0, 0], [1, 0, 0], [2, 0, 0.0]])
    tri = VertexLayout.from_vertices(V)
    assert tri.degenerate
    assert not intersect(Ray([0.5, 0.5, 1], [0, 0, -1]), tri).valid


def test_normal_convention():
    V = np.array([[0, 0, 0], [0, 1, 0], [1, 0, 0.0]])
    # (V0V2 x V0V1) = x cross y = +z
    np.testing.assert_allclose(VertexLayout.from_vertices(V).normal, [0, 0, 1])


def test_signed_distance_inside_outside():
    V = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0.0]])
    tri = VertexLayout.from_vertices(V)
    h = intersect(Ray([0.1, 0.2, 1], [0, 0, -1]), tri)
    assert h.signed_edge_dist == pytest.approx(0.1)
    h = intersect(Ray([-0.3, -0.4, 1], [0, 0, -1]), tri)
    assert h.signed_edge_dist == pytest.approx(-0.5)


def test_backward_matches_finite_differences(rng):
    eps = 1e-6
    for _ in range(30):
        V, C, r = random_query(rng)
        ray = Ray(C, r)
        g = rng.normal(size=5)

        def f(Vx):
            h = intersect(ray, VertexLayout.from_vertices(Vx), near=-np.inf)
            return g[0] * h.depth + g[1:4] @ h.lam + g[4] * h.signed_edge_dist

        ana = intersect_backward(ray, VertexLayout.from_vertices(V), g[0], g[1:4], g[4])
        fd = np.zeros((3, 3))
        for j in range(3):
            for a in range(3):
                E = np.zeros((3, 3))
                E[j, a] = eps
                fd[j, a] = (f(V + E) - f(V - E)) / (2 * eps)
        np.testing.assert_allclose(ana, fd, rtol=1e-5, atol=1e-6)


def test_diffuse_weight_values():
    assert diffuse_weight(0.0, 3.0) == 0.5
    assert diffuse_weight(1.0, 50.0) > 0.999
    assert diffuse_weight(-1.0, 50.0) < 1e-3
    # falloff from 0.88 to 0.12 spans 4 / sigma
    sigma = 2.5
    lo = np.log(0.12 / 0.88) / sigma
    hi = np.log(0.88 / 0.12) / sigma
    assert hi - lo == pytest.approx(2 * np.log(0.88 / 0.12) / sigma)
    assert 2 * np.log(0.88 / 0.12) == pytest.approx(4.0, abs=0.02)
    with pytest.raises(ValueError):
        diffuse_weight(0.1, 0.0)


@settings(max_examples=200, deadline=None)
@given(st.floats(-100, 100), st.floats(1e-3, 1e3))
def test_diffuse_weight_symmetric_and_bounded(l, sigma):
    w = diffuse_weight(l, sigma)
    assert 0.0 <= w <= 1.0
    assert diffuse_weight(-l, sigma) == 1.0 - w


def test_diffuse_weight_grad_fd(rng):
    for _ in range(50):
        l, s = rng.normal() * 0.2, rng.uniform(1, 40)
        dl, ds = diffuse_weight_grad(l, s)
        eps = 1e-7
        assert dl == pytest.approx((diffuse_weight(l + eps, s) - diffuse_weight(l - eps, s)) / (2 * eps), rel=1e-5,
                                   abs=1e-9)
        assert ds == pytest.approx((diffuse_weight(l, s + eps) - diffuse_weight(l, s - eps)) / (2 * eps), rel=1e-5,
                                   abs=1e-9)


def test_interpolate_color_at_vertices():
    c = np.eye(3)
    np.testing.assert_allclose(interpolate_color(c[0], c[1], c[2], [0, 1, 0]), c[1])

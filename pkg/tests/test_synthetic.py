import numpy as np
import pytest

from trisoup.synthetic import SCENES, cube, make_dataset, render_ground_truth, texture, textured_quad, two_plane


def test_quad_cameras_and_depth():
    sc = textured_quad(n_views=8, size=32)
    assert len(sc.cameras) == 8
    for cam in sc.cameras:
        assert np.linalg.norm(cam.center) == pytest.approx(3.0, abs=1e-12)
        tilt = np.degrees(np.arccos(cam.center[2] / 3.0))
        assert tilt <= 20.0 + 1e-9
        d, X, rid = sc.raycast(cam)
        assert (rid == 0).all()
        np.testing.assert_allclose(X[..., 2], 0.0, atol=1e-12)
        # ray distance to the plane z = 0 from the camera centre
        o, D = cam.pixel_rays()
        np.testing.assert_allclose(d, -o[2] / D[..., 2], rtol=1e-12)


def test_two_plane_surface():
    sc = two_plane(n_views=4, size=32)
    for cam in sc.cameras:
        d, X, rid = sc.raycast(cam)
        hit = rid >= 0
        np.testing.assert_allclose(X[hit, 2], -0.35 * np.abs(X[hit, 0]), atol=1e-12)
        assert set(np.unique(rid[hit])) == {0, 1}


def test_cube_front_faces_only():
    sc = cube(n_views=6, size=32)
    for cam in sc.cameras:
        d, X, rid = sc.raycast(cam)
        hit = rid >= 0
        assert 0 < hit.mean() < 1
        assert np.abs(X[hit]).max() <= 0.5 + 1e-12
        # the hit is the nearest face: every hit point faces the camera
        n = np.array([r.normal() for r in sc.rects])[rid[hit]]
        outward = np.sign((X[hit] * n).sum(-1))[:, None] * n
        assert np.all(((cam.center - X[hit]) * outward).sum(-1) > 0)


def test_raster_ground_truth_matches_analytic():
    sc = textured_quad(n_views=3, size=48)
    a, _ = render_ground_truth(sc, "analytic")
    r, _ = render_ground_truth(sc, "raster")
    for x, y in zip(a, r):
        assert np.abs(x - y).max() < 2e-3


def test_make_dataset():
    ds, sc, depths = make_dataset("two_plane", n_views=5, size=24, n_points=40, seed=2, holdout_every=2)
    assert len(ds.cameras) == 5 and ds.holdout == [0, 2, 4]
    assert ds.seed.points.shape == (40, 3)
    np.testing.assert_allclose(ds.seed.points[:, 2], -0.35 * np.abs(ds.seed.points[:, 0]), atol=1e-12)
    np.testing.assert_array_equal(ds.seed.colors, texture(ds.seed.points))
    assert all(img.shape == (24, 24, 3) for img in ds.images)
    assert all((d > 0).all() for d in depths)
    with pytest.raises(ValueError):
        make_dataset("teapot")


def test_deterministic():
    a = make_dataset("quad", n_views=3, size=16, n_points=20, seed=4)[0]
    b = make_dataset("quad", n_views=3, size=16, n_points=20, seed=4)[0]
    np.testing.assert_array_equal(a.seed.points, b.seed.points)
    for x, y in zip(a.images, b.images):
        np.testing.assert_array_equal(x, y)
    assert sorted(SCENES) == ["cube", "quad", "two_plane"]

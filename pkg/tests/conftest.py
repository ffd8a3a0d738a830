import os

import numpy as np
import pytest

os.environ.setdefault("NUMBA_THREADING_LAYER", "omp")

from trisoup.camera import Camera, look_at  # noqa: E402
from trisoup.soup import TriangleSoup  # noqa: E402


def random_soup(rng, n, degree=1, spread=1.0, scale=(0.1, 0.4), sigma=(5.0, 60.0), alpha=(-1.0, 2.0),
                flat=None):
    mu = rng.uniform(-spread, spread, size=(n, 3))
    if flat is not None:
        mu[:, 2] *= flat
    K = (degree + 1) ** 2
    sh = rng.normal(scale=0.3, size=(n, 3, K, 3))
    return TriangleSoup(mu, sh, np.log(rng.uniform(*scale, size=(n, 3))), rng.normal(size=(n, 4)),
                        rng.uniform(*alpha, size=n), np.log(rng.uniform(*sigma, size=n)),
                        active_sh_degree=degree)


def front_camera(size=16, dist=4.0, focal=None, eye=None, name="cam"):
    focal = focal or 1.1 * size
    eye = np.array([0.3, -0.2, dist]) if eye is None else np.asarray(eye, float)
    R, t = look_at(eye, [0.0, 0.0, 0.0], (0.0, 1.0, 0.0))
    return Camera(size, size, focal, focal, size / 2, size / 2, R, t, name)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_quad():
    """Small synthetic quad dataset shared by trainer/CLI tests."""
    from trisoup.synthetic import make_dataset
    ds, scene, depths = make_dataset("quad", n_views=4, size=24, n_points=60, seed=3)
    return ds


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)

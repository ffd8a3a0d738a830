import numpy as np
import pytest
from scipy.special import sph_harm_y

from trisoup import sh


def real_sh_oracle(dirs, degree):
    # real harmonics from the complex ones (Condon-Shortley phase kept)
    th = np.arccos(np.clip(dirs[:, 2], -1, 1))
    ph = np.arctan2(dirs[:, 1], dirs[:, 0])
    cols = []
    for l in range(degree + 1):
        for m in range(-l, l + 1):
            Y = sph_harm_y(l, abs(m), th, ph)
            if m < 0:
                cols.append(np.sqrt(2) * Y.imag)
            elif m == 0:
                cols.append(Y.real)
            else:
                cols.append(np.sqrt(2) * Y.real)
    return np.stack(cols, axis=1)


@pytest.mark.parametrize("degree", [0, 1, 2, 3])
def test_basis_matches_scipy(rng, degree):
    d = rng.normal(size=(300, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    np.testing.assert_allclose(sh.sh_basis(d, degree), real_sh_oracle(d, degree), atol=1e-13)


def test_basis_grad_fd(rng):
    for _ in range(20):
        d = rng.normal(size=3)
        d /= np.linalg.norm(d)
        g = np.zeros((16, 3))
        sh.basis_grad(d[0], d[1], d[2], 3, g)
        eps = 1e-6
        for a in range(3):
            e = np.zeros(3)
            e[a] = eps
            fd = (sh.sh_basis((d + e)[None], 3)[0] - sh.sh_basis((d - e)[None], 3)[0]) / (2 * eps)
            np.testing.assert_allclose(g[:, a], fd, atol=1e-8)


def test_dc_roundtrip_and_offset():
    rgb = np.array([0.2, 0.5, 0.9])
    coeffs = np.zeros((3, 1, 3))
    coeffs[:, 0, :] = sh.rgb_to_sh(rgb)
    out = sh.eval_sh(coeffs, np.array([0.0, 0.0, 1.0]))
    np.testing.assert_allclose(out, np.tile(rgb, (3, 1)), atol=1e-15)
    np.testing.assert_allclose(sh.sh_to_rgb(sh.rgb_to_sh(rgb)), rgb, atol=1e-15)


def test_eval_clamps_negative():
    coeffs = np.zeros((3, 1, 3))
    coeffs[:, 0, :] = -10.0
    assert np.all(sh.eval_sh(coeffs, np.array([1.0, 0, 0])) == 0.0)


def test_degree_truncation(rng):
    coeffs = rng.normal(size=(3, 16, 3))
    d = np.array([0.3, -0.4, 0.866])
    d /= np.linalg.norm(d)
    low = coeffs.copy()
    low[:, 4:] = 0
    np.testing.assert_allclose(sh.eval_sh(coeffs, d, degree=1), sh.eval_sh(low, d), atol=1e-15)
    assert sh.num_coeffs(3) == 16

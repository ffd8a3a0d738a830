import pytest

from trisoup.config import ConfigError, TrainConfig


def test_defaults():
    c = TrainConfig()
    assert (c.w_ssim, c.w_normal, c.w_smooth, c.w_conn, c.gamma) == (1.0, 0.05, 0.8, 10.0, 0.2)
    assert (c.lr_sh, c.lr_opacity, c.lr_mu, c.lr_mu_final) == (2.5e-3, 5e-2, 1.5e-4, 2e-6)
    assert (c.lr_rotation, c.lr_scale, c.lr_sigma) == (1e-3, 4e-3, 1e-3)
    assert (c.adam_beta1, c.adam_beta2, c.adam_eps) == (0.9, 0.999, 1e-15)
    assert (c.normal_from, c.smooth_from, c.conn_from) == (7000, 10000, 10000)
    assert (c.densify_from, c.densify_every, c.grad_threshold) == (2000, 250, 7.5e-5)
    assert (c.opacity_reset_every, c.sh_unlock_every, c.iterations) == (3000, 1000, 25000)
    assert (c.tau, c.rho, c.depth_mode) == (0.0, 0.0, "median")


def test_ini_roundtrip(tmp_path):
    c = TrainConfig().with_overrides(["iterations=123", "w_conn=2.5", "depth_mode=mean", "deterministic=false"])
    assert c.iterations == 123 and c.w_conn == 2.5 and c.depth_mode == "mean" and c.deterministic is False
    p = tmp_path / "c.ini"
    c.save(p)
    assert TrainConfig.load(p) == c
    assert "[density]" in p.read_text()


def test_float_repr_exact():
    c = TrainConfig(lr_mu=0.1 + 0.2)
    assert TrainConfig.from_ini(c.to_ini()).lr_mu == 0.1 + 0.2


@pytest.mark.parametrize("override", ["nope=1", "iterations=abc", "deterministic=maybe", "iterations",
                                      "depth_mode=max", "tile_size=0", "gamma=2", "iterations=1.5"])
def test_bad_overrides(override):
    with pytest.raises(ConfigError):
        TrainConfig().with_overrides([override])


def test_int_accepts_float_notation():
    assert TrainConfig().with_overrides(["iterations=5e3"]).iterations == 5000


def test_malformed_ini():
    with pytest.raises(ConfigError):
        TrainConfig.from_ini("not an ini")
    with pytest.raises(ConfigError):
        TrainConfig.from_ini("[train]\niterations=1\n[lr]\niterations=2\n")


def test_cadence_helpers():
    c = TrainConfig()
    dens = [t for t in range(1, 25001) if c.is_densify_iteration(t)]
    assert dens == list(range(2250, 25001, 250))
    resets = [t for t in range(1, 25001) if c.is_opacity_reset_iteration(t)]
    assert resets == list(range(3000, 25001, 3000))
    assert not c.replace(iterations=30000).is_opacity_reset_iteration(30000)
    assert c.replace(iterations=30000).is_opacity_reset_iteration(27000)
    c2 = c.replace(densify_until=3000)
    assert [t for t in range(1, 25001) if c2.is_densify_iteration(t)] == [2250, 2500, 2750, 3000]

"""Training configuration: every hyperparameter, with INI-style persistence."""
from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field, fields

from .density import DensifyConfig
from .losses import LossSchedule, LossWeights
from .rasterizer import RasterSettings


class ConfigError(ValueError):
    pass


def _f(default, section):
    return field(default=default, metadata={"section": section})


@dataclass
class TrainConfig:
    # [train]
    iterations: int = _f(25000, "train")
    seed: int = _f(0, "train")
    sh_degree: int = _f(3, "train")
    sh_unlock_every: int = _f(1000, "train")
    sigma_init_fraction: float = _f(0.5, "train")
    init_opacity: float = _f(0.1, "train")
    log_every: int = _f(100, "train")
    checkpoint_every: int = _f(0, "train")
    holdout_every: int = _f(0, "train")
    resolution_scale: float = _f(1.0, "train")
    # [lr]
    lr_sh: float = _f(2.5e-3, "lr")
    lr_opacity: float = _f(5e-2, "lr")
    lr_mu: float = _f(1.5e-4, "lr")
    lr_mu_final: float = _f(2e-6, "lr")
    mu_lr_scale: float = _f(1.0, "lr")
    lr_rotation: float = _f(1e-3, "lr")
    lr_scale: float = _f(4e-3, "lr")
    lr_sigma: float = _f(1e-3, "lr")
    adam_beta1: float = _f(0.9, "lr")
    adam_beta2: float = _f(0.999, "lr")
    adam_eps: float = _f(1e-15, "lr")
    # [loss]
    w_ssim: float = _f(1.0, "loss")
    w_normal: float = _f(0.05, "loss")
    w_smooth: float = _f(0.8, "loss")
    w_conn: float = _f(10.0, "loss")
    gamma: float = _f(0.2, "loss")
    normal_from: int = _f(7000, "loss")
    smooth_from: int = _f(10000, "loss")
    conn_from: int = _f(10000, "loss")
    smoothness_positive_exponent: bool = _f(False, "loss")
    conn_reduction: str = _f("sum", "loss")
    conn_orient_normals: bool = _f(True, "loss")
    # [density]
    densify_from: int = _f(2000, "density")
    densify_every: int = _f(250, "density")
    densify_until: int = _f(0, "density")
    grad_threshold: float = _f(7.5e-5, "density")
    split_size: float = _f(0.0, "density")
    clone_jitter: float = _f(0.1, "density")
    prune_alpha: float = _f(0.005, "density")
    max_triangles: int = _f(0, "density")
    opacity_reset_every: int = _f(3000, "density")
    opacity_reset_value: float = _f(0.1, "density")
    opacity_reset_exact: bool = _f(False, "density")
    # [connectivity]
    tau: float = _f(0.0, "connectivity")
    rho: float = _f(0.0, "connectivity")
    search_radius_factor: float = _f(3.0, "connectivity")
    graph_every: int = _f(500, "connectivity")
    conn_criteria: str = _f("outward", "connectivity")
    # [render]
    tile_size: int = _f(16, "render")
    depth_mode: str = _f("median", "render")
    background: str = _f("0,0,0", "render")
    t_min: float = _f(1e-4, "render")
    near: float = _f(0.01, "render")
    transmittance_uses_diffuse: bool = _f(True, "render")
    per_vertex_view_dirs: bool = _f(False, "render")
    deterministic: bool = _f(True, "render")
    reduce_chunks: int = _f(8, "render")

    def __post_init__(self):
        self.validate()

    def validate(self):
        for name in ("sh_unlock_every", "densify_every", "opacity_reset_every", "graph_every",
                     "log_every", "tile_size", "reduce_chunks"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.iterations < 0:
            raise ConfigError("iterations must be >= 0")
        if not 0 <= self.sh_degree <= 3:
            raise ConfigError("sh_degree must be in [0, 3]")
        if self.depth_mode not in ("median", "mean"):
            raise ConfigError("depth_mode must be 'median' or 'mean'")
        if self.conn_reduction not in ("sum", "mean"):
            raise ConfigError("conn_reduction must be 'sum' or 'mean'")
        if self.conn_criteria not in ("outward", "edge"):
            raise ConfigError("conn_criteria must be 'outward' or 'edge'")
        if not 0.0 <= self.gamma <= 1.0:
            raise ConfigError("gamma must be in [0, 1]")
        if len(self.background_rgb) != 3:
            raise ConfigError("background must be three comma-separated numbers")

    # ------------------------------------------------------------- views
    @property
    def background_rgb(self) -> tuple:
        try:
            return tuple(float(x) for x in str(self.background).split(","))
        except ValueError as e:
            raise ConfigError(f"bad background {self.background!r}") from e

    def raster(self) -> RasterSettings:
        return RasterSettings(self.tile_size, self.depth_mode, self.background_rgb, self.t_min,
                              1.0 / 255.0, self.near, self.transmittance_uses_diffuse,
                              self.per_vertex_view_dirs, self.deterministic, self.reduce_chunks)

    def weights(self) -> LossWeights:
        return LossWeights(self.w_ssim, self.w_normal, self.w_smooth, self.w_conn, self.gamma)

    def schedule(self) -> LossSchedule:
        return LossSchedule(self.normal_from, self.smooth_from, self.conn_from)

    def densify(self) -> DensifyConfig:
        return DensifyConfig(self.grad_threshold, self.split_size or None, self.clone_jitter,
                             self.prune_alpha, max_triangles=self.max_triangles or None)

    def is_densify_iteration(self, t: int) -> bool:
        if t <= self.densify_from or t % self.densify_every:
            return False
        return self.densify_until <= 0 or t <= self.densify_until

    def is_opacity_reset_iteration(self, t: int) -> bool:
        # a reset on the last step would leave no iterations to recover opacity
        return 0 < t < self.iterations and t % self.opacity_reset_every == 0

    # -------------------------------------------------------- persistence
    @classmethod
    def keys(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    def replace(self, **kw) -> "TrainConfig":
        return dataclasses.replace(self, **kw)

    def with_overrides(self, overrides) -> "TrainConfig":
        """Apply ``key=value`` strings (or a dict of strings/values)."""
        if isinstance(overrides, dict):
            items = list(overrides.items())
        else:
            items = []
            for item in overrides:
                if "=" not in item:
                    raise ConfigError(f"override {item!r} is not key=value")
                k, v = item.split("=", 1)
                items.append((k.strip(), v.strip()))
        types = {f.name: f.type for f in fields(self)}
        kw = {}
        for k, v in items:
            if k not in types:
                raise ConfigError(f"unknown config key {k!r}; valid keys: {', '.join(self.keys())}")
            kw[k] = _coerce(k, v, type(getattr(self, k)))
        return self.replace(**kw)

    def to_ini(self) -> str:
        cp = configparser.ConfigParser()
        for f in fields(self):
            sec = f.metadata["section"]
            if not cp.has_section(sec):
                cp.add_section(sec)
            v = getattr(self, f.name)
            cp.set(sec, f.name, str(v).lower() if isinstance(v, bool) else repr(v) if isinstance(v, float) else str(v))
        import io
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    def save(self, path):
        with open(path, "w") as fh:
            fh.write(self.to_ini())

    @classmethod
    def from_ini(cls, text: str) -> "TrainConfig":
        cp = configparser.ConfigParser()
        try:
            cp.read_string(text)
        except configparser.Error as e:
            raise ConfigError(f"malformed config: {e}") from e
        items = {}
        for sec in cp.sections():
            for k, v in cp.items(sec):
                if k in items:
                    raise ConfigError(f"duplicate config key {k!r}")
                items[k] = v
        return cls().with_overrides(items)

    @classmethod
    def load(cls, path) -> "TrainConfig":
        with open(path) as fh:
            return cls.from_ini(fh.read())


def _coerce(key, value, typ):
    if not isinstance(value, str):
        return typ(value)
    try:
        if typ is bool:
            low = value.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        if typ is int:
            try:
                return int(value)
            except ValueError:
                f = float(value)
                if f != int(f):
                    raise
                return int(f)
        if typ is float:
            return float(value)
        return value
    except ValueError as e:
        raise ConfigError(f"bad value for {key}: {value!r}") from e

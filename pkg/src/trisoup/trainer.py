"""Optimisation loop: sampling, scheduled losses, Adam, density control, checkpoints."""
from __future__ import annotations

import collections
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import TrainConfig
from .connectivity import EdgeGraph, build_graph
from .density import DensifyStats, accumulate_stats, densify_and_prune, reset_opacity
from .losses import total_loss
from .metrics import psnr
from .rasterizer import render
from .sceneio.checkpoint import CheckpointError, read_arrays, write_arrays
from .soup import PARAMS, TriangleSoup, init_from_points, quat_normalize

log = logging.getLogger(__name__)

METRICS_KEEP = 1000


def lr_mu(t: int, cfg: TrainConfig) -> float:
    """Exponential decay from ``lr_mu`` to ``lr_mu_final`` over the run."""
    T = max(cfg.iterations, 1)
    t = min(max(t, 0), T)
    lr0, lr1 = cfg.lr_mu * cfg.mu_lr_scale, cfg.lr_mu_final * cfg.mu_lr_scale
    if t == 0:
        return lr0
    if t == T:
        return lr1
    return float(np.exp(np.log(lr0) + (t / T) * (np.log(lr1) - np.log(lr0))))


def group_lrs(t: int, cfg: TrainConfig) -> dict:
    return dict(mu=lr_mu(t, cfg), sh=cfg.lr_sh, scale_raw=cfg.lr_scale, quat=cfg.lr_rotation,
                opacity_raw=cfg.lr_opacity, sigma_raw=cfg.lr_sigma)


def adam_step(param, grad, m, v, lr, step, beta1=0.9, beta2=0.999, eps=1e-15):
    """In-place bias-corrected Adam on row-major arrays.

    Rows (leading axis) with any non-finite gradient are left untouched. Returns the
    number of skipped rows.
    """
    g = grad.reshape(len(grad), -1)
    bad = ~np.all(np.isfinite(g), axis=1) if g.size else np.zeros(len(grad), bool)
    ok = ~bad
    if bad.all():
        return int(bad.sum())
    bc1 = 1.0 - beta1 ** step
    bc2 = 1.0 - beta2 ** step
    if bad.any():
        gg, mm, vv, pp = grad[ok], m[ok], v[ok], param[ok]
    else:
        gg, mm, vv, pp = grad, m, v, param
    mm = beta1 * mm + (1.0 - beta1) * gg
    vv = beta2 * vv + (1.0 - beta2) * gg * gg
    pp = pp - lr * (mm / bc1) / (np.sqrt(vv / bc2) + eps)
    if bad.any():
        m[ok], v[ok], param[ok] = mm, vv, pp
    else:
        m[...], v[...], param[...] = mm, vv, pp
    return int(bad.sum())


@dataclass
class TrainState:
    iteration: int
    soup: TriangleSoup
    stats: DensifyStats
    graph: EdgeGraph | None
    rng: np.random.Generator
    adam_steps: int = 0
    epoch_order: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))
    epoch_pos: int = 0
    metrics: collections.deque = field(default_factory=lambda: collections.deque(maxlen=METRICS_KEEP))
    loss_history: list = field(default_factory=list)
    events: list = field(default_factory=list)

    def next_camera(self, train_ids) -> int:
        if self.epoch_pos >= len(self.epoch_order):
            self.epoch_order = self.rng.permutation(np.asarray(train_ids, np.int64))
            self.epoch_pos = 0
        i = int(self.epoch_order[self.epoch_pos])
        self.epoch_pos += 1
        return i


def init_state(dataset, cfg: TrainConfig) -> TrainState:
    soup = init_from_points(dataset.seed, cfg, rng_seed=cfg.seed)
    if cfg.split_size > 0:
        soup.split_size = cfg.split_size
    return TrainState(0, soup, DensifyStats.zeros(soup.count), None, np.random.default_rng(cfg.seed + 1))


def _graph_due(state: TrainState, cfg: TrainConfig, t: int) -> bool:
    g = state.graph
    return g is None or g.count != state.soup.count or t - g.stamp >= cfg.graph_every


def train_step(state: TrainState, dataset, cfg: TrainConfig, raster=None, weights=None, schedule=None) -> dict:
    """One iteration (state.iteration -> state.iteration + 1)."""
    raster = raster or cfg.raster()
    weights = weights or cfg.weights()
    schedule = schedule or cfg.schedule()
    soup = state.soup
    t = state.iteration + 1
    soup.active_sh_degree = min(soup.max_sh_degree, (t - 1) // cfg.sh_unlock_every)
    ci = state.next_camera(dataset.train_ids)
    cam, target = dataset.cameras[ci], dataset.images[ci]

    on = schedule.active(t)
    if on["conn"] and weights.conn > 0 and _graph_due(state, cfg, t):
        state.graph = build_graph(soup, cfg.tau, cfg.rho, cfg.search_radius_factor, stamp=t,
                                  criteria=cfg.conn_criteria)
    soup.zero_grad()
    out = render(soup, cam, raster)
    loss, terms = total_loss(out, target, soup, weights, t, schedule, state.graph if on["conn"] else None,
                             None, cfg.smoothness_positive_exponent, cfg.conn_reduction,
                             cfg.conn_orient_normals)
    accumulate_stats(state.stats, soup.grad["mu"])

    state.adam_steps += 1
    lrs = group_lrs(t, cfg)
    skipped = 0
    for k in PARAMS:
        skipped += adam_step(getattr(soup, k), soup.grad[k], soup.exp_avg[k], soup.exp_avg_sq[k], lrs[k],
                             state.adam_steps, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    if skipped:
        log.warning("iteration=%d skipped_nonfinite_rows=%d", t, skipped)
    soup.quat[:] = quat_normalize(soup.quat)

    rec = dict(iteration=t, loss=loss, count=soup.count, camera=ci, **terms)
    if cfg.is_densify_iteration(t):
        info = densify_and_prune(soup, state.stats, cfg.densify())
        state.graph = None
        state.events.append(("densify", t))
        rec.update({f"densify_{k}": v for k, v in info.items()})
    if cfg.is_opacity_reset_iteration(t):
        reset_opacity(soup, cfg.opacity_reset_value, cfg.opacity_reset_exact)
        state.events.append(("opacity_reset", t))
    state.iteration = t
    state.loss_history.append(loss)
    state.metrics.append(rec)
    return rec


def evaluate(soup: TriangleSoup, dataset, ids, raster) -> float:
    if not ids:
        return float("nan")
    vals = [psnr(np.clip(render(soup, dataset.cameras[i], raster).color, 0, 1), dataset.images[i]) for i in ids]
    return float(np.mean(vals))


def _format(rec: dict) -> str:
    parts = []
    for k, v in rec.items():
        parts.append(f"{k}={v:.6g}" if isinstance(v, float) else f"{k}={v}")
    return " ".join(parts)


def train(dataset, cfg: TrainConfig, state: TrainState | None = None, out_dir=None,
          callback=None) -> TrainState:
    """Run until ``cfg.iterations``; optionally resume from ``state``."""
    dataset.validate_for_training()
    cfg.validate()
    if state is None:
        state = init_state(dataset, cfg)
    out = Path(out_dir) if out_dir is not None else None
    metrics_file = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        metrics_file = open(out / "metrics.log", "a")
    raster, weights, schedule = cfg.raster(), cfg.weights(), cfg.schedule()
    t0 = time.perf_counter()
    try:
        while state.iteration < cfg.iterations:
            rec = train_step(state, dataset, cfg, raster, weights, schedule)
            t = state.iteration
            if callback is not None:
                callback(state, rec)
            if t % cfg.log_every == 0 or t == cfg.iterations:
                if dataset.holdout:
                    rec["holdout_psnr"] = evaluate(state.soup, dataset, dataset.holdout, raster)
                rec["elapsed"] = time.perf_counter() - t0
                line = _format(rec)
                log.info(line)
                if metrics_file is not None:
                    metrics_file.write(line + "\n")
                    metrics_file.flush()
            if out is not None and cfg.checkpoint_every and t % cfg.checkpoint_every == 0:
                save_checkpoint(out / f"checkpoint_{t:06d}.tsc", state, cfg)
    finally:
        if metrics_file is not None:
            metrics_file.close()
    return state


# ----------------------------------------------------------- checkpoints

def save_checkpoint(path, state: TrainState, cfg: TrainConfig | None = None):
    soup = state.soup
    arrays = {}
    for k in PARAMS:
        arrays[k] = getattr(soup, k)
        arrays[f"exp_avg.{k}"] = soup.exp_avg[k]
        arrays[f"exp_avg_sq.{k}"] = soup.exp_avg_sq[k]
    arrays["stats.max_grad"] = state.stats.max_grad
    arrays["stats.grad_dir"] = state.stats.grad_dir
    arrays["stats.max_extent"] = state.stats.max_extent
    arrays["epoch_order"] = np.asarray(state.epoch_order, np.int64)
    if state.graph is not None:
        g = state.graph
        arrays["graph"] = np.stack([g.tri_a, g.edge_a, g.tri_b, g.edge_b, g.reversed.astype(np.int64)])
    meta = dict(
        count=soup.count,
        iteration=state.iteration,
        max_sh_degree=soup.max_sh_degree,
        active_sh_degree=soup.active_sh_degree,
        split_size=float(soup.split_size),
        adam_steps=state.adam_steps,
        epoch_pos=state.epoch_pos,
        stats_iterations=state.stats.iterations,
        rng=state.rng.bit_generator.state,
        graph=None if state.graph is None else dict(count=state.graph.count, stamp=state.graph.stamp),
        config=None if cfg is None else cfg.to_ini(),
    )
    write_arrays(path, arrays, meta)


def load_checkpoint(path) -> tuple[TrainState, TrainConfig | None]:
    arrays, meta = read_arrays(path)
    try:
        soup = TriangleSoup(*(arrays[k] for k in PARAMS), active_sh_degree=meta["active_sh_degree"])
        for k in PARAMS:
            soup.exp_avg[k] = arrays[f"exp_avg.{k}"]
            soup.exp_avg_sq[k] = arrays[f"exp_avg_sq.{k}"]
        soup.split_size = meta["split_size"]
        if soup.count != meta["count"]:
            raise CheckpointError(f"{path}: count mismatch")
        soup.check_lockstep()
        stats = DensifyStats(arrays["stats.max_grad"], arrays["stats.grad_dir"], arrays["stats.max_extent"],
                             meta["stats_iterations"])
        graph = None
        if meta["graph"] is not None:
            ga = arrays["graph"]
            graph = EdgeGraph(ga[0], ga[1], ga[2], ga[3], ga[4].astype(bool), meta["graph"]["count"],
                              meta["graph"]["stamp"])
        rng = np.random.default_rng()
        rng.bit_generator.state = meta["rng"]
    except (KeyError, AssertionError) as e:
        raise CheckpointError(f"{path}: incomplete checkpoint ({e})") from e
    state = TrainState(meta["iteration"], soup, stats, graph, rng, meta["adam_steps"],
                       arrays["epoch_order"], meta["epoch_pos"])
    cfg = TrainConfig.from_ini(meta["config"]) if meta.get("config") else None
    return state, cfg


def load_soup(path) -> TriangleSoup:
    return load_checkpoint(path)[0].soup

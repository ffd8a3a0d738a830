"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The synthetic-recovery criteria (4-6) train complete models and take
several minutes each on a single core; the whole file runs in about 20 minutes.
"""
import copy
import time

import numpy as np
import pytest

from trisoup.camera import Camera, look_at
from trisoup.config import TrainConfig
from trisoup.connectivity import build_graph, build_graph_brute_force, admissibility_matrix, edge_data
from trisoup.density import DensifyStats, accumulate_stats, densify_and_prune, split_children
from trisoup.fusion import fuse_depth_maps
from trisoup.geometry import Ray, VertexLayout, intersect
from trisoup.losses import LossWeights, connectivity_loss, total_loss
from trisoup.metrics import chamfer
from trisoup.rasterizer import RasterSettings, render
from trisoup.soup import PARAMS, triangle_normals
from trisoup.synthetic import make_dataset
from trisoup.trainer import adam_step, evaluate, init_state, save_checkpoint, train, train_step

import conftest
from conftest import random_soup
from gradcheck import fd_grads_terms, gradient_error
from test_connectivity import facing_pair, paired_gap
from test_geometry import linear_oracle
from test_sceneio import covisible, plane_views, survivors


def report(number, ok, detail):
    line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    conftest.ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


# --------------------------------------------------------------- 1

def test_c01_gradient_integrity():
    t0 = time.perf_counter()
    rng = np.random.default_rng(11)
    soup = random_soup(rng, 10, degree=1, spread=0.4, scale=(0.3, 0.8), sigma=(3, 8), flat=0.3)
    R, t = look_at([0.2, -0.1, 3.5], [0, 0, 0], (0, 1, 0))
    cam = Camera(16, 16, 18, 18, 8, 8, R, t)
    target = rng.uniform(size=(16, 16, 3))
    graph = build_graph(soup)
    w = LossWeights()
    wk = {"ssim": w.ssim, "normal": w.normal, "smooth": w.smooth, "conn": w.conn}
    it = 20000  # every scheduled term active

    def terms(s):
        _, tm = total_loss(render(s, cam), target, s, w, it, graph=graph, backward=False)
        return [wk[k] * v for k, v in tm.items()]

    soup.zero_grad()
    _, tm = total_loss(render(soup, cam), target, soup, w, it, graph=graph)
    num = fd_grads_terms(soup, terms, eps=1e-6)
    errs = {k: gradient_error(soup.grad[k], num[k]) for k in PARAMS}
    dt = time.perf_counter() - t0
    ok = set(tm) == {"ssim", "normal", "smooth", "conn"} and max(errs.values()) < 1e-4 and dt < 60
    report(1, ok, "max rel err " + ", ".join(f"{k}={v:.1e}" for k, v in errs.items()) + f"; {dt:.1f}s")


# --------------------------------------------------------------- 2

def test_c02_geometry_oracle():
    # rays from a random eye through a random interior point, as the rasterizer issues them;
    # grazing rays with unbounded depth are ill-conditioned for any solver and are covered by unit tests
    rng = np.random.default_rng(2)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(10_000):
        V = rng.normal(size=(3, 3))
        C = rng.normal(size=3) * 3 + np.array([0, 0, 6.0])
        b = rng.dirichlet(np.ones(3))
        ray = Ray(C, b @ V - C)
        hit = intersect(ray, VertexLayout.from_vertices(V), near=-np.inf)
        d, lam = linear_oracle(V, C, ray.dir)
        worst = max(worst, abs(hit.depth - d), np.abs(hit.lam - lam).max(), np.abs(hit.lam - b).max())
    dt = time.perf_counter() - t0
    report(2, worst < 1e-9 and dt < 5, f"10000 queries, max |diff| {worst:.1e}, {dt:.2f}s")


# --------------------------------------------------------------- 3

def test_c03_rasterizer_equivalence():
    rng = np.random.default_rng(3)
    t0 = time.perf_counter()
    worst = 0.0
    for i in range(50):
        n = int(rng.integers(1, 201))
        soup = random_soup(rng, n, degree=int(rng.integers(0, 4)), spread=1.2)
        eye = rng.normal(size=3)
        eye = 3.5 * eye / np.linalg.norm(eye)
        R, t = look_at(eye, rng.normal(scale=0.2, size=3), (0, 1, 0) if abs(eye[1]) < 3 else (1, 0, 0))
        cam = Camera(64, 64, 70, 70, 32 + rng.uniform(-4, 4), 32 + rng.uniform(-4, 4), R, t)
        st = RasterSettings(depth_mode="median" if i % 2 else "mean", tile_size=int(rng.choice([8, 16])))
        a = render(soup, cam, st)
        b = render(soup, cam, st, brute_force=True)
        for f in ("color", "depth", "normal"):
            worst = max(worst, float(np.abs(getattr(a, f) - getattr(b, f)).max()))
    dt = time.perf_counter() - t0
    report(3, worst < 1e-6 and dt < 60, f"50 scenes, max |tiled - exhaustive| {worst:.1e}, {dt:.1f}s")


# --------------------------------------------------------------- 4

QUAD_CFG = dict(iterations=5000, max_triangles=500)


def test_c04_photometric_recovery():
    ds, _, _ = make_dataset("quad", n_views=20, size=128, n_points=500, holdout_every=5)
    cfg = TrainConfig(**QUAD_CFG)
    t0 = time.perf_counter()
    st = train(ds, cfg)
    dt = time.perf_counter() - t0
    p = evaluate(st.soup, ds, ds.holdout, cfg.raster())
    report(4, p >= 30 and dt < 15 * 60,
           f"held-out PSNR {p:.2f} dB on {len(ds.holdout)} views, {st.soup.count} triangles, {dt / 60:.1f} min")


# --------------------------------------------------------------- 5 and 6

SCENE_DEPTH = 3.0    # camera distance to the ridge
SCENE_EXTENT = 6.0   # side of the two-plane footprint
TWO_PLANE_CFG = dict(iterations=3000, normal_from=750, smooth_from=1500, conn_from=1500, max_triangles=600)


@pytest.fixture(scope="module")
def two_plane_runs():
    """One model per depth mode, trained with all geometric losses active for the second half."""
    ds, scene, depths = make_dataset("two_plane", n_views=20, size=64, n_points=500)
    obs = scene.observed_points()
    ref = obs[np.random.default_rng(0).choice(len(obs), 50_000, replace=False)]
    runs = {}
    for mode in ("median", "mean"):
        cfg = TrainConfig(depth_mode=mode, **TWO_PLANE_CFG)
        st = train(ds, cfg)
        renders = [render(st.soup, cam, cfg.raster()) for cam in ds.cameras]
        cloud = fuse_depth_maps(renders, ds.cameras)
        runs[mode] = dict(renders=renders, cloud=cloud, chamfer=chamfer(cloud.points, ref)[2])
    return ds, depths, runs


def test_c05_geometric_recovery(two_plane_runs):
    ds, depths, runs = two_plane_runs
    run = runs["median"]
    errs = []
    for r, d in zip(run["renders"], depths):
        v = d > 0
        # a pixel without a median depth counts as an unbounded error
        errs.append(np.where(r.depth[v] > 0, np.abs(r.depth[v] - d[v]), np.inf))
    errs = np.sort(np.concatenate(errs))
    k = int(np.ceil(0.95 * len(errs)))
    mae = float(errs[:k].mean())
    ch = run["chamfer"]
    ok = mae < 0.01 * SCENE_DEPTH and ch < 0.005 * SCENE_EXTENT
    report(5, ok, f"depth MAE over best 95% of valid pixels {mae:.4f} (limit {0.01 * SCENE_DEPTH:.3f}); "
                  f"fused Chamfer {ch:.4f} (limit {0.005 * SCENE_EXTENT:.3f}), {len(run['cloud'].points)} points")


def test_c06_median_beats_mean(two_plane_runs):
    _, _, runs = two_plane_runs
    med, mean = runs["median"]["chamfer"], runs["mean"]["chamfer"]
    report(6, med < mean, f"fused Chamfer median {med:.5f} vs mean {mean:.5f}")


# --------------------------------------------------------------- 7

def test_c07_connectivity():
    s = facing_pair(gap=0.2, dihedral=20.0)
    g = build_graph(s)
    for step in range(1, 501):
        lr = 1e-2 * 0.01 ** (step / 500)
        s.zero_grad()
        _, gV = connectivity_loss(s, g)
        s.vertices_backward(gV)
        for k in ("mu", "scale_raw", "quat"):
            adam_step(getattr(s, k), s.grad[k], s.exp_avg[k], s.exp_avg_sq[k], lr, step)
    n = triangle_normals(s.vertices())[0]
    gap = paired_gap(s, g)
    ang = float(np.degrees(np.arccos(min(1.0, abs(n[0] @ n[1])))))
    rng = np.random.default_rng(7)
    same = True
    for _ in range(10):
        soup = random_soup(rng, 166, scale=(0.05, 0.3), flat=0.2)  # 498 edges
        ed = edge_data(soup.vertices())
        M = admissibility_matrix(ed)
        fast = build_graph(soup)
        slow = build_graph_brute_force(soup)
        same &= fast.pairs() == slow.pairs()
        # every chosen pair is admissible per the elementwise decision
        same &= all(M[a, b] for a, b in fast.pairs())
    report(7, gap < 1e-3 and ang < 1.0 and same,
           f"gap {gap:.1e}, angle {ang:.2e} deg after 500 steps; hash graph == brute force on 10 scenes: {same}")


# --------------------------------------------------------------- 8

def test_c08_densification():
    rng = np.random.default_rng(8)
    s = random_soup(rng, 100, degree=0)
    kids = split_children(s, np.arange(100))
    V = s.vertices()
    Vk = kids.vertices().reshape(4, 100, 3, 3)
    mids = 0.5 * (V[:, [0, 1, 2]] + V[:, [1, 2, 0]])  # m01, m12, m20
    expect = np.stack([
        np.stack([V[:, 0], mids[:, 0], mids[:, 2]], 1),
        np.stack([mids[:, 0], V[:, 1], mids[:, 1]], 1),
        np.stack([mids[:, 2], mids[:, 1], V[:, 2]], 1),
        np.stack([mids[:, 1], mids[:, 2], mids[:, 0]], 1),
    ])
    pos_err = float(np.abs(Vk - expect).max())
    area = 0.5 * triangle_normals(V)[1]
    area_k = 0.5 * triangle_normals(kids.vertices())[1].reshape(4, 100).sum(0)
    area_err = float(np.abs(area_k - area).max())
    dc = s.sh[:, :, 0, :]
    dck = kids.sh[:, :, 0, :].reshape(4, 100, 3, 3)
    colours_exact = (np.array_equal(dck[3, :, 0], 0.5 * (dc[:, 1] + dc[:, 2]))
                     and np.array_equal(dck[0, :, 1], 0.5 * (dc[:, 0] + dc[:, 1]))
                     and np.array_equal(dck[0, :, 0], dc[:, 0]))
    s = random_soup(rng, 40, scale=(0.05, 0.4), alpha=(-6.0, 3.0))
    s.split_size = 0.15
    st = DensifyStats.zeros(s.count)
    lockstep = True
    for _ in range(10):
        accumulate_stats(st, rng.normal(scale=1e-4, size=(s.count, 3)))
        s.opacity_raw += rng.normal(scale=0.5, size=s.count)
        densify_and_prune(s, st)
        try:
            s.check_lockstep()
        except AssertionError:
            lockstep = False
        lockstep &= len(st) == s.count
    ok = pos_err <= 1e-12 and area_err <= 1e-12 and colours_exact and lockstep
    report(8, ok, f"corner/midpoint err {pos_err:.1e}, area err {area_err:.1e}, midpoint DC exact {colours_exact}, "
                  f"lockstep over 10 cycles {lockstep} (final count {s.count})")


# --------------------------------------------------------------- 9

def test_c09_fusion_filtering():
    cams, depths = plane_views()
    rng = np.random.default_rng(9)
    masks = [rng.uniform(size=d.shape) < 0.02 for d in depths]
    noisy = [np.where(m, 1.1 * d, d) for m, d in zip(masks, depths)]
    cloud = fuse_depth_maps(noisy, cams, px_thresh=1.0, min_views=3)
    kept = survivors(cloud, cams, depths)
    bad_total = sum(int(m.sum()) for m in masks)
    bad_kept = sum(int((k & m).sum()) for k, m in zip(kept, masks))
    clean = [covisible(cams, depths, r) & ~masks[r] for r in range(len(cams))]
    clean_kept = sum(int((k & c).sum()) for k, c in zip(kept, clean)) / sum(int(c.sum()) for c in clean)
    report(9, bad_kept == 0 and clean_kept >= 0.99,
           f"corrupt removed {bad_total - bad_kept}/{bad_total}, co-visible clean retained {100 * clean_kept:.2f}%")


# --------------------------------------------------------------- 10

def test_c10_schedule(tiny_quad):
    cfg = TrainConfig(iterations=30000, densify_from=10 ** 6, opacity_reset_every=10 ** 6)
    warm = train(tiny_quad, cfg.replace(iterations=100))
    results = {}
    for t in (6999, 7000, 9999, 10000):
        runs = {}
        for name, kw in (("full", {}), ("photo", dict(w_normal=0.0, w_smooth=0.0, w_conn=0.0)),
                         ("normal", dict(w_smooth=0.0, w_conn=0.0))):
            st = copy.deepcopy(warm)
            st.iteration = t - 1
            train_step(st, tiny_quad, cfg.replace(**kw))
            runs[name] = st.soup.grad
        same = lambda a, b: all(np.array_equal(runs[a][k], runs[b][k]) for k in PARAMS)
        results[t] = (same("full", "photo"), same("full", "normal"))
    sched_ok = results == {6999: (True, True), 7000: (False, True), 9999: (False, True), 10000: (False, False)}

    dcfg = TrainConfig(iterations=3260, max_triangles=150)
    st = init_state(tiny_quad, dcfg)
    st.iteration = 1990
    train(tiny_quad, dcfg, state=st)
    events = [t for kind, t in st.events if kind == "densify"]
    dens_ok = events == list(range(2250, 3251, 250))
    report(10, sched_ok and dens_ok, f"bitwise-zero checks {results}; densify events {events}")


# --------------------------------------------------------------- 11

def test_c11_determinism(tmp_path):
    ds, _, _ = make_dataset("quad", n_views=8, size=48, n_points=150)
    # compressed schedule so one short run crosses every stage: densify, opacity reset, all losses
    cfg = TrainConfig(iterations=400, seed=3, densify_from=100, densify_every=50, opacity_reset_every=150,
                      normal_from=120, smooth_from=200, conn_from=200, graph_every=60, max_triangles=600)
    blobs = []
    for k in range(2):
        st = train(ds, cfg)
        save_checkpoint(tmp_path / f"run{k}.tsc", st, cfg)
        blobs.append((tmp_path / f"run{k}.tsc").read_bytes())
    kinds = sorted({kind for kind, _ in st.events})
    report(11, blobs[0] == blobs[1], f"checkpoints {len(blobs[0])} bytes, identical={blobs[0] == blobs[1]}, "
                                     f"events {kinds}, final count {st.soup.count}")

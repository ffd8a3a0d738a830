import numpy as np
import pytest

from trisoup.connectivity import (EDGE_VERTS, EdgeRef, admissibility_matrix, admissible, build_graph,
                                  build_graph_brute_force, edge_data, export_polylines)
from trisoup.losses import connectivity_loss
from trisoup.soup import TriangleSoup, triangle_normals
from trisoup.trainer import adam_step

from conftest import random_soup


def ref(mid, out):
    return EdgeRef(0, 0, np.asarray(mid, float), np.asarray(out, float))


def facing_pair(gap=0.2, dihedral=0.0):
    """Two equilateral triangles (circumradius 1) mirrored across a shared edge line."""
    half, h = np.sqrt(3) / 2, 1.5
    A = np.array([[-half, 0, 0], [half, 0, 0], [0, h, 0]])
    th = np.radians(dihedral)
    B = np.array([[-half, 0, 0], [half, 0, 0], [0, -h * np.cos(th), h * np.sin(th)]]) - [0, gap, 0]
    return TriangleSoup.from_vertices(np.stack([A, B]), np.zeros((2, 3, 1, 3)), 0.9, 10.0)


def paired_gap(soup, graph):
    V = soup.vertices()
    gaps = []
    for a, ea, b, eb, rv in zip(graph.tri_a, graph.edge_a, graph.tri_b, graph.edge_b, graph.reversed):
        ia = EDGE_VERTS[ea]
        ib = EDGE_VERTS[eb][::-1] if rv else EDGE_VERTS[eb]
        gaps += [np.linalg.norm(V[a, ia[i]] - V[b, ib[i]]) for i in range(2)]
    return max(gaps)


def grid_soup(n=4, gap=0.05):
    """Coplanar right-triangle grid, each triangle shrunk about its centroid."""
    tris = []
    for i in range(n):
        for j in range(n):
            p = np.array([[i, j, 0], [i + 1, j, 0], [i + 1, j + 1, 0], [i, j + 1, 0]], float)
            for t in (p[[0, 1, 2]], p[[0, 2, 3]]):
                c = t.mean(axis=0)
                tris.append(c + (1 - gap) * (t - c))
    V = np.array(tris)
    return TriangleSoup.from_vertices(V, np.zeros((len(V), 3, 1, 3)), 0.9, 10.0)


def test_admissible_examples():
    a = ref([0, 0, 0], [0, 1, 0])
    # mirror-facing neighbour across a gap
    assert admissible(a, ref([0, 0.2, 0], [0, -1, 0]))
    # neighbour directly behind
    assert not admissible(a, ref([0, -0.2, 0], [0, -1, 0]))
    # same-pointing outward vectors
    assert not admissible(a, ref([0, 0.2, 0], [0, 1, 0]))
    # coincident midpoints: direction passes, orientation decides
    assert admissible(a, ref([0, 0, 0], [0, -1, 0]))
    # thresholds
    b = ref([1, 1, 0] / np.sqrt(2), [0, -1, 0])
    assert admissible(a, b, tau=0.7) and not admissible(a, b, tau=0.71)
    c = ref([0, 0.2, 0], np.array([0.6, -0.8, 0]))
    assert admissible(a, c, rho=0.79) and not admissible(a, c, rho=0.8)


def test_facing_pair_graph():
    s = facing_pair()
    g = build_graph(s)
    assert len(g) == 2
    assert sorted(zip(g.tri_a.tolist(), g.edge_a.tolist(), g.tri_b.tolist(), g.edge_b.tolist())) == \
        [(0, 0, 1, 0), (1, 0, 0, 0)]
    assert not g.reversed.any()


def test_reversed_pairing():
    s = facing_pair()
    V = s.vertices()
    V[1] = V[1][[1, 0, 2]]
    s = TriangleSoup.from_vertices(V, np.zeros((2, 3, 1, 3)), 0.9, 10.0)
    g = build_graph(s)
    assert len(g) == 2 and g.reversed.all()
    assert paired_gap(s, g) == pytest.approx(0.2, abs=1e-12)


def test_isolated_and_empty():
    s = facing_pair()
    one = s.subset([0])
    assert len(build_graph(one)) == 0
    assert len(build_graph(s.subset([]))) == 0


def test_grid_interior_edges():
    s = grid_soup(4)
    g = build_graph(s)
    # every edge shared in the underlying grid is connected to its geometric twin
    V = s.vertices()
    twins = 0
    for a, ea, b, eb in zip(g.tri_a, g.edge_a, g.tri_b, g.edge_b):
        pa = V[a, EDGE_VERTS[ea]]
        pb = V[b, EDGE_VERTS[eb]]
        # twin edges are parallel and their midpoints are closest across the gap
        da = pa[1] - pa[0]
        db = pb[1] - pb[0]
        assert abs(abs(da @ db) / np.linalg.norm(da) / np.linalg.norm(db) - 1) < 1e-12
        assert np.linalg.norm(pa.mean(axis=0) - pb.mean(axis=0)) < 0.05
        twins += 1
    interior = 3 * 2 * 16 - 4 * 4  # all edges minus boundary edges
    assert twins == interior
    assert g.pairs() == build_graph_brute_force(s).pairs()


@pytest.mark.parametrize("seed", range(5))
def test_hash_equals_brute_force(seed):
    rng = np.random.default_rng(seed)
    s = random_soup(rng, 166, spread=1.0, scale=(0.05, 0.3), flat=0.2)
    for tau, rho, crit in [(0, 0, "outward"), (0.3, 0.2, "outward"), (0, 0, "edge")]:
        fast = build_graph(s, tau, rho, criteria=crit)
        slow = build_graph_brute_force(s, tau, rho, criteria=crit)
        assert fast.pairs() == slow.pairs()
        np.testing.assert_array_equal(fast.reversed, slow.reversed)


def test_admissibility_matrix_matches_scalar(rng):
    s = random_soup(rng, 20, flat=0.3)
    ed = edge_data(s.vertices())
    M = admissibility_matrix(ed, 0.1, 0.05)
    for a in range(0, 60, 7):
        for b in range(60):
            if a != b:
                assert M[a, b] == admissible(ed.ref(a), ed.ref(b), 0.1, 0.05)


def test_graph_never_self_connects(rng):
    s = random_soup(rng, 50)
    g = build_graph(s)
    assert np.all(g.tri_a != g.tri_b)
    assert len(set(zip(g.tri_a.tolist(), g.edge_a.tolist()))) == len(g)
    assert g.count == s.count


def test_stale_graph_rejected(rng):
    s = random_soup(rng, 10)
    g = build_graph(s)
    s.keep(np.arange(9))
    with pytest.raises(ValueError):
        g.check(s)
    with pytest.raises(ValueError):
        connectivity_loss(s, g)


def test_connectivity_pulls_pair_together():
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
    assert paired_gap(s, g) < 1e-3
    assert np.degrees(np.arccos(min(1.0, abs(n[0] @ n[1])))) < 1.0


def test_export_polylines(tmp_path):
    s = facing_pair()
    g = build_graph(s)
    p = tmp_path / "conn.obj"
    export_polylines(p, s, g)
    lines = p.read_text().splitlines()
    verts = [list(map(float, ln.split()[1:])) for ln in lines if ln.startswith("v ")]
    segs = [ln for ln in lines if ln.startswith("l ")]
    assert len(segs) == 2 and len(verts) == 4
    np.testing.assert_allclose(verts[0], [0, 0, 0], atol=1e-9)
    np.testing.assert_allclose(verts[1], [0, -0.2, 0], atol=1e-9)

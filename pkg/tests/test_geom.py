import math

import numpy as np
import pytest

import tdconvs.geom as G
import tdconvs.tensor as T
from tdconvs.errors import ContractError
from tdconvs.gradcheck import check_grads


def make_ps(rng, n, m=3, labels=False):
    return G.PointSet(
        rng.random((n, 3)), T.Tensor(rng.standard_normal((n, m))),
        rng.integers(0, 4, n) if labels else None)


# --- independent oracles ----------------------------------------------

def oracle_raster_2d(xy, feats, h, w, radius):
    """Full O(N*cells) scan; math.fsum means."""
    n_cells = h * w
    values = np.zeros((n_cells, feats.shape[1]))
    counts = np.zeros(n_cells, dtype=np.int64)
    members = {}
    for c in range(n_cells):
        cx, cy = (c // w + 0.5) / h, (c % w + 0.5) / w
        mem = [i for i in range(len(xy))
               if (xy[i, 0] - cx) ** 2 + (xy[i, 1] - cy) ** 2 < radius ** 2]
        members[c] = mem
        counts[c] = len(mem)
        if mem:
            for d in range(feats.shape[1]):
                values[c, d] = math.fsum(feats[i, d] for i in mem) / len(mem)
    return values.reshape(h, w, -1), counts.reshape(h, w), members


def oracle_raster_3d(xyz, feats, h, w, z, radius):
    n_cells = h * w * z
    values = np.zeros((n_cells, feats.shape[1]))
    counts = np.zeros(n_cells, dtype=np.int64)
    for c in range(n_cells):
        ci, rest = divmod(c, w * z)
        cj, ck = divmod(rest, z)
        cx, cy, cz = (ci + 0.5) / h, (cj + 0.5) / w, (ck + 0.5) / z
        mem = [i for i in range(len(xyz))
               if (xyz[i, 0] - cx) ** 2 + (xyz[i, 1] - cy) ** 2
               + (xyz[i, 2] - cz) ** 2 < radius ** 2]
        counts[c] = len(mem)
        if mem:
            for d in range(feats.shape[1]):
                values[c, d] = math.fsum(feats[i, d] for i in mem) / len(mem)
    return values.reshape(h, w, z, -1), counts.reshape(h, w, z)


def oracle_knn(coords, k):
    n = len(coords)
    out = np.empty((n, k), dtype=np.int64)
    for i in range(n):
        d2 = [((coords[i] - coords[j]) ** 2).sum() for j in range(n)]
        out[i] = sorted(range(n), key=lambda j: (d2[j], j))[:k]
    return out


# --- grid arrangement --------------------------------------------------

def test_grid_arrange_single_cell():
    assert np.array_equal(G.grid_arrange(1, 1), [[[0.5, 0.5]]])


def test_grid_arrange_2x2():
    centers = G.grid_arrange(2, 2).reshape(-1, 2)
    expected = [(0.25, 0.25), (0.25, 0.75), (0.75, 0.25), (0.75, 0.75)]
    assert np.allclose(centers, expected)


def test_grid_arrange_40x40_spacing():
    centers = G.grid_arrange(40, 40).reshape(-1, 2)
    assert centers.shape == (1600, 2)
    d = centers[None, :, :] - centers[:, None, :]
    dist = np.sqrt((d ** 2).sum(-1))
    np.fill_diagonal(dist, np.inf)
    assert np.isclose(dist.min(), 0.025)


def test_grid_arrange_3d():
    assert np.array_equal(G.grid_arrange_3d(1, 1, 1), [[[[0.5, 0.5, 0.5]]]])
    two = G.grid_arrange_3d(2, 1, 1).reshape(-1, 3)
    assert np.allclose(two, [(0.25, 0.5, 0.5), (0.75, 0.5, 0.5)])
    assert G.grid_arrange_3d(40, 40, 5).reshape(-1, 3).shape == (8000, 3)


# --- rasterization -----------------------------------------------------

def test_cylindricize_single_point():
    f = np.array([[2.0, -1.0]])
    ps = G.PointSet(np.array([[0.25, 0.25, 0.7]]), T.Tensor(f))
    cmap = G.cylindricize(ps, G.GridSpec2D(2, 2))  # default radius: half-diagonal
    assert np.array_equal(cmap.values.data[0, 0], f[0])
    assert cmap.counts[0, 0] == 1
    assert cmap.counts.sum() == 1
    assert np.all(cmap.values.data[cmap.counts == 0] == 0.0)


def test_cylindricize_two_point_mean():
    f = np.array([[1.0], [3.0]])
    coords = np.array([[0.5, 0.5, 0.1], [0.52, 0.48, 0.9]])
    ps = G.PointSet(coords, T.Tensor(f))
    cmap = G.cylindricize(ps, G.GridSpec2D(1, 1))
    assert cmap.counts[0, 0] == 2
    assert np.isclose(cmap.values.data[0, 0, 0], 2.0)


@pytest.mark.parametrize("grid", [(2, 2), (10, 10), (40, 40)])
def test_cylindricize_matches_bruteforce(grid):
    rng = np.random.default_rng(grid[0])
    ps = make_ps(rng, 1000, m=5)
    spec = G.GridSpec2D(*grid)
    cmap = G.cylindricize(ps, spec)
    values, counts, _ = oracle_raster_2d(
        ps.coords[:, :2], ps.feats.data, spec.h, spec.w, spec.radius)
    assert np.array_equal(cmap.counts, counts)
    assert np.array_equal(cmap.values.data, values)


def test_spheroidize_point_at_center():
    f = np.array([[5.0]])
    ps = G.PointSet(np.array([[0.25, 0.25, 0.25]]), T.Tensor(f))
    vol = G.spheroidize(ps, G.GridSpec3D(2, 2, 2, radius=0.2))
    assert vol.counts[0, 0, 0] == 1
    assert vol.counts.sum() == 1
    assert vol.values.data[0, 0, 0, 0] == 5.0


def test_spheroidize_overlapping_spheres_share_point():
    # radius wide enough that both cells of a 2x1x1 grid contain the point
    ps = G.PointSet(np.array([[0.5, 0.5, 0.5]]), T.Tensor(np.array([[7.0]])))
    vol = G.spheroidize(ps, G.GridSpec3D(2, 1, 1, radius=0.6))
    assert vol.counts[0, 0, 0] == 1 and vol.counts[1, 0, 0] == 1
    assert vol.values.data[0, 0, 0, 0] == 7.0
    assert vol.values.data[1, 0, 0, 0] == 7.0


@pytest.mark.parametrize("grid", [(4, 4, 2), (40, 40, 5)])
def test_spheroidize_matches_bruteforce(grid):
    rng = np.random.default_rng(grid[2])
    ps = make_ps(rng, 1000, m=4)
    spec = G.GridSpec3D(*grid)
    vol = G.spheroidize(ps, spec)
    values, counts = oracle_raster_3d(
        ps.coords, ps.feats.data, spec.h, spec.w, spec.z, spec.radius)
    assert np.array_equal(vol.counts, counts)
    assert np.array_equal(vol.values.data, values)


def test_raster_permutation_invariance_bitwise():
    rng = np.random.default_rng(9)
    ps = make_ps(rng, 400, m=6)
    spec2 = G.GridSpec2D(5, 7)
    spec3 = G.GridSpec3D(3, 4, 3)
    base2 = G.cylindricize(ps, spec2)
    base3 = G.spheroidize(ps, spec3)
    for seed in range(3):
        perm = np.random.default_rng(seed).permutation(ps.n)
        shuffled = G.PointSet(ps.coords[perm], T.Tensor(ps.feats.data[perm]))
        assert np.array_equal(G.cylindricize(shuffled, spec2).values.data,
                              base2.values.data)
        assert np.array_equal(G.spheroidize(shuffled, spec3).values.data,
                              base3.values.data)


def test_raster_coverage_at_half_diagonal():
    rng = np.random.default_rng(3)
    ps = make_ps(rng, 500, m=2)
    spec = G.GridSpec2D(8, 8)  # default radius = cell half-diagonal
    cmap = G.cylindricize(ps, spec)
    _, _, members = oracle_raster_2d(ps.coords[:, :2], ps.feats.data,
                                     spec.h, spec.w, spec.radius)
    covered = set()
    for mem in members.values():
        covered.update(mem)
    assert covered == set(range(ps.n))
    assert cmap.counts.sum() >= ps.n


def test_raster_coverage_3d_at_half_diagonal():
    rng = np.random.default_rng(13)
    ps = make_ps(rng, 400, m=2)
    vol = G.spheroidize(ps, G.GridSpec3D(5, 5, 3))
    assert vol.counts.sum() >= ps.n
    # every point within the default radius of at least one center
    centers = G.grid_arrange_3d(5, 5, 3).reshape(-1, 3)
    d = np.sqrt(((ps.coords[:, None, :] - centers[None]) ** 2).sum(-1))
    assert np.all(d.min(axis=1) < G.half_diagonal_3d(5, 5, 3))


# --- grid sampling -----------------------------------------------------

def test_grid_sample_2d_reproduces_cell_centers():
    rng = np.random.default_rng(1)
    values = rng.standard_normal((4, 6, 3))
    cmap = G.CylinderMap(T.Tensor(values), np.ones((4, 6), dtype=np.int64),
                         G.GridSpec2D(4, 6))
    centers = G.grid_arrange(4, 6).reshape(1, -1, 2)
    out = G.grid_sample_2d(cmap, centers)
    assert np.array_equal(out.data[0], values.reshape(-1, 3))


def test_grid_sample_2d_midpoint_is_mean():
    rng = np.random.default_rng(2)
    values = rng.standard_normal((3, 3, 2))
    cmap = G.CylinderMap(T.Tensor(values), np.ones((3, 3), dtype=np.int64),
                         G.GridSpec2D(3, 3))
    mid = np.array([[[1.0 / 3.0, 0.5 / 3.0]]])  # between cells (0,0) and (1,0)
    out = G.grid_sample_2d(cmap, mid)
    assert np.allclose(out.data[0, 0], 0.5 * (values[0, 0] + values[1, 0]),
                       atol=1e-12)


def test_grid_sample_2d_affine_along_segment():
    rng = np.random.default_rng(3)
    values = rng.standard_normal((5, 5, 2))
    cmap = G.CylinderMap(T.Tensor(values), np.ones((5, 5), dtype=np.int64),
                         G.GridSpec2D(5, 5))
    a = np.array([1.5 / 5.0, 2.5 / 5.0])
    b = np.array([2.5 / 5.0, 2.5 / 5.0])   # adjacent cell centers
    ts = np.linspace(0.0, 1.0, 9)
    pts = (a[None] * (1 - ts[:, None]) + b[None] * ts[:, None])[None]
    out = G.grid_sample_2d(cmap, pts).data[0]
    expected = (1 - ts[:, None]) * out[0] + ts[:, None] * out[-1]
    assert np.allclose(out, expected, atol=1e-12)


def test_grid_sample_2d_clamps_out_of_range():
    values = np.arange(8.0).reshape(2, 2, 2)
    cmap = G.CylinderMap(T.Tensor(values), np.ones((2, 2), dtype=np.int64),
                         G.GridSpec2D(2, 2))
    out = G.grid_sample_2d(cmap, np.array([[[-3.0, -3.0], [4.0, 4.0]]]))
    assert np.array_equal(out.data[0, 0], values[0, 0])
    assert np.array_equal(out.data[0, 1], values[1, 1])


def test_grid_sample_2d_nan_coordinate_rejected():
    cmap = G.CylinderMap(T.Tensor(np.zeros((2, 2, 1))),
                         np.zeros((2, 2), dtype=np.int64), G.GridSpec2D(2, 2))
    with pytest.raises(ContractError):
        G.grid_sample_2d(cmap, np.array([[[np.nan, 0.5]]]))


@pytest.mark.parametrize("seed", range(5))
def test_grid_sample_2d_gradcheck_both_paths(seed):
    rng = np.random.default_rng(seed)
    values = T.Tensor(rng.standard_normal((5, 5, 3)), requires_grad=True)
    cmap = G.CylinderMap(values, np.ones((5, 5), dtype=np.int64), G.GridSpec2D(5, 5))
    cell = rng.integers(0, 4, size=(4, 3, 2))
    frac = rng.uniform(0.2, 0.8, size=(4, 3, 2))
    coords = T.Tensor((cell + frac + 0.5) / 5.0, requires_grad=True)
    proj = T.Tensor(rng.standard_normal((4, 3, 3)))
    err = check_grads(lambda: T.tsum(G.grid_sample_2d(cmap, coords) * proj),
                      [values, coords])
    assert err < 1e-5


def test_grid_sample_3d_reproduces_cell_centers():
    rng = np.random.default_rng(4)
    values = rng.standard_normal((3, 3, 2, 4))
    vol = G.SphereVolume(T.Tensor(values), np.ones((3, 3, 2), dtype=np.int64),
                         G.GridSpec3D(3, 3, 2))
    centers = G.grid_arrange_3d(3, 3, 2).reshape(1, -1, 3)
    out = G.grid_sample_3d(vol, centers)
    assert np.array_equal(out.data[0], values.reshape(-1, 4))


def test_grid_sample_3d_midpoint_along_z():
    rng = np.random.default_rng(5)
    values = rng.standard_normal((2, 2, 2, 3))
    vol = G.SphereVolume(T.Tensor(values), np.ones((2, 2, 2), dtype=np.int64),
                         G.GridSpec3D(2, 2, 2))
    mid = np.array([[[0.25, 0.25, 0.5]]])
    out = G.grid_sample_3d(vol, mid)
    assert np.allclose(out.data[0, 0],
                       0.5 * (values[0, 0, 0] + values[0, 0, 1]), atol=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_grid_sample_3d_gradcheck_both_paths(seed):
    rng = np.random.default_rng(seed)
    values = T.Tensor(rng.standard_normal((3, 3, 2, 4)), requires_grad=True)
    vol = G.SphereVolume(values, np.ones((3, 3, 2), dtype=np.int64),
                         G.GridSpec3D(3, 3, 2))
    dims = (3, 3, 2)
    coords = np.empty((4, 2, 3))
    for a, d in enumerate(dims):
        cell = rng.integers(0, max(d - 1, 1), size=(4, 2))
        coords[:, :, a] = (cell + rng.uniform(0.2, 0.8, (4, 2)) + 0.5) / d
    coords = T.Tensor(coords, requires_grad=True)
    proj = T.Tensor(rng.standard_normal((4, 2, 4)))
    err = check_grads(lambda: T.tsum(G.grid_sample_3d(vol, coords) * proj),
                      [values, coords])
    assert err < 1e-5


# --- knn / fps / group / interpolation ---------------------------------

def test_knn_collinear():
    coords = np.array([[0.0, 0, 0], [1.0, 0, 0], [3.0, 0, 0]])
    ps = G.PointSet(coords, T.Tensor(np.zeros((3, 1))))
    idx = G.knn(ps, 2)
    assert list(idx[1]) == [1, 0]  # middle point: itself, then x=0


def test_knn_k1_is_self():
    rng = np.random.default_rng(0)
    ps = make_ps(rng, 20)
    assert np.array_equal(G.knn(ps, 1).ravel(), np.arange(20))


def test_knn_k_too_large():
    ps = make_ps(np.random.default_rng(0), 5)
    with pytest.raises(ContractError):
        G.knn(ps, 6)


@pytest.mark.parametrize("k", [1, 16, 64])
def test_knn_matches_bruteforce(k):
    rng = np.random.default_rng(k)
    ps = make_ps(rng, 500)
    assert np.array_equal(G.knn(ps, k), oracle_knn(ps.coords, k))


def test_knn_independent_of_features():
    rng = np.random.default_rng(7)
    coords = rng.random((50, 3))
    a = G.PointSet(coords, T.Tensor(rng.standard_normal((50, 3))))
    b = G.PointSet(coords, T.Tensor(rng.standard_normal((50, 8))))
    assert np.array_equal(G.knn(a, 5), G.knn(b, 5))


def test_fps_full_sample_is_permutation():
    rng = np.random.default_rng(1)
    ps = make_ps(rng, 30)
    sel = G.fps(ps, 30)
    assert sorted(sel.tolist()) == list(range(30))


def test_fps_square_corners():
    coords = np.array([[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0]], dtype=float)
    ps = G.PointSet(coords, T.Tensor(np.zeros((4, 1))))
    sel = G.fps(ps, 2)
    assert sel[0] == 0          # all corners tie on centroid distance; lowest index
    assert sel[1] == 2          # the diagonal corner


def test_fps_min_distance_sequence_non_increasing():
    rng = np.random.default_rng(4)
    ps = make_ps(rng, 200)
    sel = G.fps(ps, 50)
    # replay: the min-distance of each newly added point to the already
    # chosen set must never increase
    seq = []
    for t in range(1, 50):
        chosen = ps.coords[sel[:t]]
        d = np.sqrt(((ps.coords[sel[t]] - chosen) ** 2).sum(axis=1)).min()
        seq.append(d)
    assert all(a >= b - 1e-12 for a, b in zip(seq, seq[1:]))


def test_fps_out_of_range():
    ps = make_ps(np.random.default_rng(0), 5)
    with pytest.raises(ContractError):
        G.fps(ps, 6)


def test_fps_independent_of_features():
    rng = np.random.default_rng(8)
    coords = rng.random((40, 3))
    a = G.PointSet(coords, T.Tensor(rng.standard_normal((40, 2))))
    b = G.PointSet(coords, T.Tensor(rng.standard_normal((40, 5))))
    assert np.array_equal(G.fps(a, 10), G.fps(b, 10))


def test_group_self_neighbors():
    rng = np.random.default_rng(2)
    ps = make_ps(rng, 6, m=2)
    out = G.group(ps, np.arange(6)[:, None])
    assert np.array_equal(out.data[:, 0, :3], np.zeros((6, 3)))
    assert np.array_equal(out.data[:, 0, 3:], ps.feats.data)


def test_group_relative_coords_antisymmetric():
    coords = np.array([[0.0, 0, 0], [1.0, 2.0, 3.0]])
    ps = G.PointSet(coords, T.Tensor(np.array([[1.0], [2.0]])))
    out = G.group(ps, np.array([[1], [0]]))
    assert np.array_equal(out.data[0, 0, :3], -out.data[1, 0, :3])


def test_group_matches_naive_gather():
    rng = np.random.default_rng(3)
    ps = make_ps(rng, 25, m=4)
    idx = rng.integers(0, 25, size=(25, 6))
    out = G.group(ps, idx).data
    for i in range(25):
        for k in range(6):
            assert np.array_equal(out[i, k, :3], ps.coords[idx[i, k]] - ps.coords[i])
            assert np.array_equal(out[i, k, 3:], ps.feats.data[idx[i, k]])


def test_group_index_out_of_range():
    ps = make_ps(np.random.default_rng(0), 5)
    with pytest.raises(ContractError):
        G.group(ps, np.array([[7]] * 5))


def test_interpolate_3nn_coincident_source():
    rng = np.random.default_rng(5)
    src = make_ps(rng, 10, m=3)
    out = G.interpolate_3nn(src, src.coords[4:5])
    assert np.allclose(out.data[0], src.feats.data[4], atol=1e-6)


def test_interpolate_3nn_equidistant_mean():
    coords = np.array([[1.0, 0, 0], [-0.5, np.sqrt(3) / 2, 0],
                       [-0.5, -np.sqrt(3) / 2, 0]])
    f = np.array([[3.0], [6.0], [9.0]])
    src = G.PointSet(coords, T.Tensor(f))
    out = G.interpolate_3nn(src, np.zeros((1, 3)))
    assert np.allclose(out.data[0, 0], 6.0)


def test_interpolate_3nn_matches_direct_formula():
    rng = np.random.default_rng(6)
    src = make_ps(rng, 12, m=3)
    dst = rng.random((7, 3))
    out = G.interpolate_3nn(src, dst).data
    for q in range(7):
        d = np.sqrt(((src.coords - dst[q]) ** 2).sum(axis=1))
        order = sorted(range(12), key=lambda j: (d[j] ** 2, j))[:3]
        w = 1.0 / (d[order] + 1e-8)
        w = w / w.sum()
        expected = (w[:, None] * src.feats.data[order]).sum(axis=0)
        assert np.array_equal(out[q], expected)


def test_interpolate_3nn_pads_small_source():
    src = G.PointSet(np.array([[0.1, 0.1, 0.1], [0.9, 0.9, 0.9]]),
                     T.Tensor(np.array([[1.0], [5.0]])))
    out = G.interpolate_3nn(src, np.array([[0.5, 0.5, 0.5]]))
    assert out.shape == (1, 1)
    assert np.isfinite(out.data).all()


def test_pointset_validation():
    with pytest.raises(ContractError):
        G.PointSet(np.zeros((3, 2)), T.Tensor(np.zeros((3, 1))))
    with pytest.raises(ContractError):
        G.PointSet(np.zeros((3, 3)), T.Tensor(np.zeros((2, 1))))

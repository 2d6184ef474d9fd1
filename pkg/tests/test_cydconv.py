import numpy as np
import pytest

import tdconvs.cydconv as C
import tdconvs.geom as G
import tdconvs.tensor as T
from tdconvs.errors import DimensionError


def make_layer(rng, n=10, m=4, out=6, grid=(3, 3), k_c=2, knn=(2, 3, 4)):
    ps = G.PointSet(rng.random((n, 3)),
                    T.Tensor(rng.standard_normal((n, m)), requires_grad=True))
    p = C.CyDConvParams.create(rng, m, out, G.GridSpec2D(*grid), k_c=k_c,
                               knn_sizes=knn)
    return ps, p


def test_fresh_layer_predicts_zero_offsets():
    rng = np.random.default_rng(0)
    ps, p = make_layer(rng)
    off = C.predict_offsets_2d(ps, p)
    assert off.shape == (10, 2, 2)
    assert np.all(off.data == 0.0)


def test_default_offset_count_is_four():
    p = C.CyDConvParams.create(np.random.default_rng(0), 3, 8, G.GridSpec2D(4, 4))
    assert p.k_c == 4
    assert p.offset_head.out_dim == 8
    assert p.knn_sizes == (16, 32, 64)


def test_zeroed_weight_head_gives_constant_bias():
    rng = np.random.default_rng(1)
    ps, p = make_layer(rng)
    p.weight_head.weight.data[:] = 0.0
    p.weight_head.bias.data[:] = 0.75
    w = C.predict_weights_2d(ps, p)
    assert w.shape == (10, 2)
    assert np.all(w.data == 0.75)


def test_sample_points_anchor_at_own_projection():
    rng = np.random.default_rng(2)
    ps, p = make_layer(rng)
    p.ref_base.data[:] = 0.0
    coords = C.sample_points_2d(ps, C.predict_offsets_2d(ps, p), p)
    expected = np.broadcast_to(ps.coords[:, None, :2], (10, 2, 2))
    assert np.array_equal(coords.data, expected)


def test_sample_points_include_ref_base_jitter():
    rng = np.random.default_rng(3)
    ps, p = make_layer(rng)
    coords = C.sample_points_2d(ps, C.predict_offsets_2d(ps, p), p)
    expected = ps.coords[:, None, :2] + p.ref_base.data[None, :, :]
    assert np.allclose(coords.data, expected)
    # jitter stays within half a cell per axis
    assert np.all(np.abs(p.ref_base.data[:, 0]) <= 0.5 / p.grid.h)
    assert np.all(np.abs(p.ref_base.data[:, 1]) <= 0.5 / p.grid.w)


def test_out_of_range_samples_clamp_without_error():
    rng = np.random.default_rng(4)
    ps, p = make_layer(rng)
    cmap = G.cylindricize(ps, p.grid)
    offsets = T.Tensor(np.full((10, 2, 2), 5.0))   # pushes far past 1.0
    coords = C.sample_points_2d(ps, offsets, p)
    out = G.grid_sample_2d(cmap, coords)
    corner = cmap.values.data[-1, -1]
    assert np.allclose(out.data, corner[None, None, :])


def test_translation_by_one_cell_shifts_samples():
    # interior synthetic case: shifting points and map content by one full
    # cell leaves the sampled features unchanged
    rng = np.random.default_rng(5)
    h = w = 5
    values = rng.standard_normal((h, w, 3))
    shifted = np.roll(values, 1, axis=0)
    spec = G.GridSpec2D(h, w)
    base_xy = np.stack([np.full(4, 1.5 / h), np.linspace(0.3, 0.7, 4)], axis=1)
    cmap_a = G.CylinderMap(T.Tensor(values), np.ones((h, w), dtype=np.int64), spec)
    cmap_b = G.CylinderMap(T.Tensor(shifted), np.ones((h, w), dtype=np.int64), spec)
    out_a = G.grid_sample_2d(cmap_a, base_xy[None])
    out_b = G.grid_sample_2d(cmap_b, (base_xy + [1.0 / h, 0.0])[None])
    assert np.allclose(out_a.data, out_b.data, atol=1e-12)


def test_aggregate_residual_with_zero_weights():
    rng = np.random.default_rng(6)
    ps, p = make_layer(rng)
    p.weight_head.weight.data[:] = 0.0
    p.weight_head.bias.data[:] = 0.0
    cmap = G.cylindricize(ps, p.grid)
    f_a = C.aggregate_map_features(ps, cmap, p)
    expected = T.linear(ps.feats, p.agg_proj)
    assert np.array_equal(f_a.data, expected.data)


def test_aggregate_single_point_single_cell():
    f = np.array([[2.0, -3.0]])
    ps = G.PointSet(np.array([[0.5, 0.5, 0.5]]), T.Tensor(f))
    rng = np.random.default_rng(7)
    p = C.CyDConvParams.create(rng, 2, 2, G.GridSpec2D(1, 1), k_c=1, knn_sizes=(1, 1, 1))
    p.ref_base.data[:] = 0.0
    p.weight_head.weight.data[:] = 0.0
    p.weight_head.bias.data[:] = 1.0
    p.agg_proj.weight.data[:] = np.eye(2)
    p.agg_proj.bias.data[:] = 0.0
    cmap = G.cylindricize(ps, p.grid)
    f_a = C.aggregate_map_features(ps, cmap, p)
    assert np.allclose(f_a.data, f + f)  # residual + the cell value (= own feature)


def test_aggregate_feature_dim_mismatch():
    rng = np.random.default_rng(8)
    ps, p = make_layer(rng, m=4)
    bad = G.CylinderMap(T.Tensor(np.zeros((3, 3, 7))),
                        np.zeros((3, 3), dtype=np.int64), p.grid)
    with pytest.raises(DimensionError):
        C.aggregate_map_features(ps, bad, p)


def test_mfl_single_point_degenerate():
    rng = np.random.default_rng(9)
    f = rng.standard_normal((1, 3))
    ps = G.PointSet(rng.random((1, 3)), T.Tensor(f))
    p = C.CyDConvParams.create(rng, 3, 4, G.GridSpec2D(2, 2), knn_sizes=(16, 32, 64))
    outs = C.mfl(ps, p)
    for out, proj in zip(outs, p.mfl_projs):
        desc = np.concatenate([np.zeros(3), f[0]])
        expected = desc @ proj.weight.data + proj.bias.data
        assert np.allclose(out.data[0], expected)


def test_mfl_duplicating_nonmaximal_neighbor_keeps_output():
    # max-pool property at the mfl computation (group -> linear -> max):
    # repeating an already-present neighbor cannot change the pooled result
    rng = np.random.default_rng(10)
    ps, p = make_layer(rng, n=8)
    idx = G.knn(ps, 3)
    grouped = G.group(ps, idx)
    pooled = T.maximum(T.linear(grouped, p.mfl_projs[0]), axis=1)
    dup = np.concatenate([idx, idx[:, :1]], axis=1)   # duplicate neighbor
    pooled_dup = T.maximum(T.linear(G.group(ps, dup), p.mfl_projs[0]), axis=1)
    assert np.array_equal(pooled.data, pooled_dup.data)


def test_mfl_duplicate_point_ties_break_by_index():
    # a coordinate duplicate (same distance everywhere) always sorts
    # after its lower-index original in every neighbor list
    rng = np.random.default_rng(11)
    ps, _ = make_layer(rng, n=8, knn=(2, 3, 4))
    coords2 = np.concatenate([ps.coords, ps.coords[:1]], axis=0)
    feats2 = np.concatenate([ps.feats.data, ps.feats.data[:1]], axis=0)
    ps2 = G.PointSet(coords2, T.Tensor(feats2))
    idx2 = G.knn(ps2, 5)
    for row in idx2[:8]:
        row = row.tolist()
        if 8 in row:
            assert 0 in row and row.index(0) < row.index(8)


def test_forward_shape_and_nonnegative():
    rng = np.random.default_rng(12)
    ps, p = make_layer(rng, n=12, m=4, out=6)
    out = C.cydconv_forward(ps, p)
    assert out.shape == (12, 6)
    assert np.all(out.data >= 0.0)


def test_forward_permutation_equivariance():
    rng = np.random.default_rng(13)
    ps, p = make_layer(rng, n=15, m=3, out=5)
    base = C.cydconv_forward(ps, p).data
    perm = rng.permutation(15)
    shuffled = G.PointSet(ps.coords[perm], T.Tensor(ps.feats.data[perm]))
    out = C.cydconv_forward(shuffled, p).data
    assert np.allclose(out, base[perm], atol=1e-9)


def test_all_params_get_gradient():
    rng = np.random.default_rng(14)
    ps, p = make_layer(rng, n=10, m=3, out=5)
    out = C.cydconv_forward(ps, p)
    T.backward(T.tsum(out * T.Tensor(rng.standard_normal(out.shape))))
    for name, t in p.named("layer"):
        assert t.grad is not None, name
        assert np.abs(t.grad).sum() > 0.0, name


def test_softmax_weight_flag():
    rng = np.random.default_rng(15)
    ps, p = make_layer(rng)
    p.softmax_weights = True
    w = C.predict_weights_2d(ps, p)
    assert np.allclose(w.data.sum(axis=1), 1.0)

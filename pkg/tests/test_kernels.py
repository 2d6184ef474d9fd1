import os
import subprocess
import sys

import numpy as np
import pytest

from tdconvs import kernels as K

needs_numba = pytest.mark.skipif(not K.HAVE_NUMBA, reason="numba unavailable")


@needs_numba
@pytest.mark.parametrize("seed", range(3))
def test_flavours_agree_on_membership_and_means(seed):
    rng = np.random.default_rng(seed)
    xy = rng.random((400, 2))
    xyz = rng.random((400, 3))
    feats = rng.standard_normal((400, 5))

    for args in ((xy, 7, 9, 0.09),):
        a = K.NUMBA_IMPL["members_2d"](*args)
        b = K.NUMPY_IMPL["members_2d"](*args)
        assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])
        va, ca = K.NUMBA_IMPL["scatter_mean_fwd"](a[0], a[1], feats)
        vb, cb = K.NUMPY_IMPL["scatter_mean_fwd"](b[0], b[1], feats)
        assert np.array_equal(va, vb) and np.array_equal(ca, cb)
        g = rng.standard_normal(va.shape)
        ga = K.NUMBA_IMPL["scatter_mean_bwd"](a[0], a[1], ca, g, 400)
        gb = K.NUMPY_IMPL["scatter_mean_bwd"](b[0], b[1], cb, g, 400)
        assert np.array_equal(ga, gb)

    a3 = K.NUMBA_IMPL["members_3d"](xyz, 4, 5, 3, 0.15)
    b3 = K.NUMPY_IMPL["members_3d"](xyz, 4, 5, 3, 0.15)
    assert np.array_equal(a3[0], b3[0]) and np.array_equal(a3[1], b3[1])


@needs_numba
@pytest.mark.parametrize("seed", range(3))
def test_flavours_agree_on_knn_and_fps(seed):
    rng = np.random.default_rng(seed)
    pts = rng.random((300, 3))
    assert np.array_equal(K.NUMBA_IMPL["knn_query"](pts, pts, 9),
                          K.NUMPY_IMPL["knn_query"](pts, pts, 9))
    assert np.array_equal(K.NUMBA_IMPL["fps"](pts, 5, 60),
                          K.NUMPY_IMPL["fps"](pts, 5, 60))


@needs_numba
@pytest.mark.parametrize("seed", range(3))
def test_flavours_agree_on_interpolation(seed):
    rng = np.random.default_rng(seed)
    values = rng.standard_normal((6, 5, 4))
    u = rng.random(50) * 7 - 1.0     # includes out-of-range queries
    v = rng.random(50) * 6 - 1.0
    fa = K.NUMBA_IMPL["bilinear_fwd"](values, u, v)
    fb = K.NUMPY_IMPL["bilinear_fwd"](values, u, v)
    assert np.array_equal(fa, fb)
    g = rng.standard_normal(fa.shape)
    ca = K.NUMBA_IMPL["bilinear_bwd_coords"](values, u, v, g)
    cb = K.NUMPY_IMPL["bilinear_bwd_coords"](values, u, v, g)
    assert np.array_equal(ca[0], cb[0]) and np.array_equal(ca[1], cb[1])
    va = K.NUMBA_IMPL["bilinear_bwd_values"]((6, 5, 4), u, v, g)
    vb = K.NUMPY_IMPL["bilinear_bwd_values"]((6, 5, 4), u, v, g)
    assert np.allclose(va, vb, rtol=1e-12, atol=1e-15)   # accumulation order differs

    vol = rng.standard_normal((4, 4, 3, 2))
    t = rng.random(50) * 4 - 0.7
    ta = K.NUMBA_IMPL["trilinear_fwd"](vol, u, v, t)
    tb = K.NUMPY_IMPL["trilinear_fwd"](vol, u, v, t)
    assert np.array_equal(ta, tb)
    gt = rng.standard_normal(ta.shape)
    tca = K.NUMBA_IMPL["trilinear_bwd_coords"](vol, u, v, t, gt)
    tcb = K.NUMPY_IMPL["trilinear_bwd_coords"](vol, u, v, t, gt)
    for x, y in zip(tca, tcb):
        assert np.allclose(x, y, rtol=1e-12, atol=1e-15)
    tva = K.NUMBA_IMPL["trilinear_bwd_values"]((4, 4, 3, 2), u, v, t, gt)
    tvb = K.NUMPY_IMPL["trilinear_bwd_values"]((4, 4, 3, 2), u, v, t, gt)
    assert np.allclose(tva, tvb, rtol=1e-12, atol=1e-15)


def test_pure_numpy_env_flag_selects_fallback():
    env = dict(os.environ, TDCONVS_PURE_NUMPY="1")
    code = ("from tdconvs import kernels; "
            "print(kernels.ACTIVE)")
    out = subprocess.run([sys.executable, "-c", code], env=env,
                         capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "numpy"


def test_default_prefers_numba_when_available():
    if K.HAVE_NUMBA:
        env = dict(os.environ)
        env.pop("TDCONVS_PURE_NUMPY", None)
        out = subprocess.run(
            [sys.executable, "-c", "from tdconvs import kernels; print(kernels.ACTIVE)"],
            env=env, capture_output=True, text=True, check=True)
        assert out.stdout.strip() == "numba"


def test_network_forward_matches_across_flavours():
    # the whole forward pass agrees between flavours on the hot-kernel
    # outputs it consumes (scatter means, knn, fps, interpolation)
    if not K.HAVE_NUMBA:
        pytest.skip("numba unavailable")
    import tdconvs.geom as G
    import tdconvs.net as N
    import tdconvs.tensor as T

    rng = np.random.default_rng(0)
    ps = G.PointSet(rng.random((64, 3)), T.Tensor(rng.standard_normal((64, 2))),
                    rng.integers(0, 3, 64))
    cfg = N.NetworkConfig(n_classes=3, input_feat_dim=2, n_input_points=64,
                          level_sizes=(64, 32, 16, 8),
                          map_specs=((4, 4), (3, 3), (2, 2), (2, 2)),
                          volume_spec=(3, 3, 2), channel_widths=(8, 8, 8, 8),
                          k_c=2, k_s=2, knn_sizes=(2, 3, 4))
    outputs = {}
    for flavour in ("numba", "numpy"):
        K.ACTIVE = flavour
        try:
            state = N.build_network(cfg, seed=0)
            out = N.forward(ps, state)
            outputs[flavour] = [l.data.copy() for l in out.logits]
        finally:
            K.ACTIVE = "numba"
    for a, b in zip(outputs["numba"], outputs["numpy"]):
        assert np.allclose(a, b, rtol=1e-10, atol=1e-12)

"""Central finite-difference verification of every differentiable op.

Each registered check builds a small randomized instance, runs the
analytic backward, perturbs every input element by +-h and compares.
Relative error is |analytic - numeric| / max(1, |analytic|, |numeric|)
so near-zero gradients are judged on an absolute scale.

Checks resolve ops through their module namespaces at call time, so a
corrupted backward rule (monkeypatched in the fault-injection test) is
picked up and reported by name.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from . import cydconv as cyd
from . import geom
from . import net as netmod
from . import spdconv as spd
from . import tensor as T

DEFAULT_H = 1e-6
OP_TOL = 1e-5
NETWORK_TOL = 1e-4


def numeric_grads(fn: Callable[[], T.Tensor], leaves: Sequence[T.Tensor],
                  h: float = DEFAULT_H) -> list[np.ndarray]:
    grads = []
    for leaf in leaves:
        g = np.zeros_like(leaf.data)
        flat = leaf.data.reshape(-1)
        gf = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            f1 = fn().item()
            flat[i] = orig - h
            f2 = fn().item()
            flat[i] = orig
            gf[i] = (f1 - f2) / (2.0 * h)
        grads.append(g)
    return grads


def analytic_grads(fn: Callable[[], T.Tensor],
                   leaves: Sequence[T.Tensor]) -> list[np.ndarray]:
    for leaf in leaves:
        leaf.zero_grad()
    T.backward(fn())
    return [leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
            for leaf in leaves]


def rel_error(a: np.ndarray, n: np.ndarray) -> float:
    denom = np.maximum(1.0, np.maximum(np.abs(a), np.abs(n)))
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


def check_grads(fn: Callable[[], T.Tensor], leaves: Sequence[T.Tensor],
                h: float = DEFAULT_H) -> float:
    ana = analytic_grads(fn, leaves)
    num = numeric_grads(fn, leaves, h)
    return max(rel_error(a, n) for a, n in zip(ana, num))


def _projection(rng: np.random.Generator, shape) -> T.Tensor:
    # fixed random scalarization so the whole Jacobian is exercised
    return T.Tensor(rng.standard_normal(shape))


def _scalarize(rng: np.random.Generator, expr_fn):
    proj = None

    def fn():
        nonlocal proj
        out = expr_fn()
        if proj is None:
            proj = _projection(rng, out.shape)
        return T.tsum(out * proj)

    return fn


def _interior_coords(rng, n, k, dims):
    """Sampling coordinates that keep the continuous index 0.2-0.8 deep
    inside a non-border cell, away from interpolation kinks."""
    out = np.empty((n, k, len(dims)))
    for a, d in enumerate(dims):
        cell = rng.integers(0, max(d - 1, 1), size=(n, k))
        frac = rng.uniform(0.2, 0.8, size=(n, k))
        out[:, :, a] = (cell + frac + 0.5) / d
    return out


# --- per-op checks -----------------------------------------------------

def _check_linear(seed):
    rng = np.random.default_rng(seed)
    x = T.Tensor(rng.standard_normal((4, 3)), requires_grad=True)
    p = T.LinearParams.create(rng, 3, 2)
    fn = _scalarize(rng, lambda: T.linear(x, p))
    return check_grads(fn, [x, p.weight, p.bias])


def _check_batch_norm(seed):
    rng = np.random.default_rng(seed)
    x = T.Tensor(rng.standard_normal((8, 4)), requires_grad=True)
    p = T.BatchNormParams.create(4)
    p.gamma.data[:] = rng.uniform(0.5, 1.5, 4)
    p.beta.data[:] = rng.standard_normal(4)
    fn = _scalarize(rng, lambda: T.batch_norm(x, p))
    return check_grads(fn, [x, p.gamma, p.beta])


def _check_relu(seed):
    rng = np.random.default_rng(seed)
    vals = rng.standard_normal((5, 4))
    vals += np.sign(vals) * 0.05          # keep away from the kink at 0
    x = T.Tensor(vals, requires_grad=True)
    fn = _scalarize(rng, lambda: T.relu(x))
    return check_grads(fn, [x])


def _check_sigmoid(seed):
    rng = np.random.default_rng(seed)
    x = T.Tensor(rng.standard_normal((5, 4)), requires_grad=True)
    fn = _scalarize(rng, lambda: T.sigmoid(x))
    return check_grads(fn, [x])


def _check_concat(seed):
    rng = np.random.default_rng(seed)
    a = T.Tensor(rng.standard_normal((3, 2)), requires_grad=True)
    b = T.Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    fn = _scalarize(rng, lambda: T.concat([a, b], axis=1))
    return check_grads(fn, [a, b])


def _check_grid_sample_2d_values(seed):
    rng = np.random.default_rng(seed)
    spec = geom.GridSpec2D(5, 5)
    values = T.Tensor(rng.standard_normal((5, 5, 3)), requires_grad=True)
    cmap = geom.CylinderMap(values, np.ones((5, 5), dtype=np.int64), spec)
    coords = _interior_coords(rng, 4, 3, (5, 5))
    fn = _scalarize(rng, lambda: geom.grid_sample_2d(cmap, coords))
    return check_grads(fn, [values])


def _check_grid_sample_2d_coords(seed):
    rng = np.random.default_rng(seed)
    spec = geom.GridSpec2D(5, 5)
    cmap = geom.CylinderMap(T.Tensor(rng.standard_normal((5, 5, 3))),
                            np.ones((5, 5), dtype=np.int64), spec)
    coords = T.Tensor(_interior_coords(rng, 4, 3, (5, 5)), requires_grad=True)
    fn = _scalarize(rng, lambda: geom.grid_sample_2d(cmap, coords))
    return check_grads(fn, [coords])


def _check_grid_sample_3d_values(seed):
    rng = np.random.default_rng(seed)
    spec = geom.GridSpec3D(3, 3, 2)
    values = T.Tensor(rng.standard_normal((3, 3, 2, 4)), requires_grad=True)
    vol = geom.SphereVolume(values, np.ones((3, 3, 2), dtype=np.int64), spec)
    coords = _interior_coords(rng, 4, 2, (3, 3, 2))
    fn = _scalarize(rng, lambda: geom.grid_sample_3d(vol, coords))
    return check_grads(fn, [values])


def _check_grid_sample_3d_coords(seed):
    rng = np.random.default_rng(seed)
    spec = geom.GridSpec3D(3, 3, 2)
    vol = geom.SphereVolume(T.Tensor(rng.standard_normal((3, 3, 2, 4))),
                            np.ones((3, 3, 2), dtype=np.int64), spec)
    coords = T.Tensor(_interior_coords(rng, 4, 2, (3, 3, 2)), requires_grad=True)
    fn = _scalarize(rng, lambda: geom.grid_sample_3d(vol, coords))
    return check_grads(fn, [coords])


def _check_cylindricize(seed):
    rng = np.random.default_rng(seed)
    feats = T.Tensor(rng.standard_normal((30, 3)), requires_grad=True)
    ps = geom.PointSet(rng.random((30, 3)), feats)
    spec = geom.GridSpec2D(3, 3)
    fn = _scalarize(rng, lambda: geom.cylindricize(ps, spec).values)
    return check_grads(fn, [feats])


def _check_spheroidize(seed):
    rng = np.random.default_rng(seed)
    feats = T.Tensor(rng.standard_normal((30, 3)), requires_grad=True)
    ps = geom.PointSet(rng.random((30, 3)), feats)
    spec = geom.GridSpec3D(3, 3, 2)
    fn = _scalarize(rng, lambda: geom.spheroidize(ps, spec).values)
    return check_grads(fn, [feats])


def _check_interpolate_3nn(seed):
    rng = np.random.default_rng(seed)
    feats = T.Tensor(rng.standard_normal((10, 3)), requires_grad=True)
    src = geom.PointSet(rng.random((10, 3)), feats)
    dst = rng.random((5, 3))
    fn = _scalarize(rng, lambda: geom.interpolate_3nn(src, dst))
    return check_grads(fn, [feats])


def _check_cydconv(seed):
    rng = np.random.default_rng(seed)
    feats = T.Tensor(rng.standard_normal((8, 4)), requires_grad=True)
    ps = geom.PointSet(rng.random((8, 3)), feats)
    p = cyd.CyDConvParams.create(rng, 4, 5, geom.GridSpec2D(3, 3), k_c=2,
                                 knn_sizes=(2, 3, 4))
    # perturb the offset head off zero so its gradient path is generic
    p.offset_head.weight.data[:] = 0.02 * rng.standard_normal(
        p.offset_head.weight.shape)
    leaves = [feats] + [t for _, t in p.named("p")]
    fn = _scalarize(rng, lambda: cyd.cydconv_forward(ps, p))
    return check_grads(fn, leaves)


def _check_spdconv(seed):
    rng = np.random.default_rng(seed)
    feats = T.Tensor(rng.standard_normal((7, 3)), requires_grad=True)
    enc = T.Tensor(rng.standard_normal((7, 2)), requires_grad=True)
    ps = geom.PointSet(rng.random((7, 3)), feats)
    p = spd.SpDConvParams.create(rng, in_dim=3, enc_dim=2, out_dim=4,
                                 grid=geom.GridSpec3D(3, 3, 2), k_s=2)
    p.offset_head.weight.data[:] = 0.02 * rng.standard_normal(
        p.offset_head.weight.shape)
    leaves = [feats, enc] + [t for _, t in p.named("p")]
    fn = _scalarize(rng, lambda: spd.spdconv_forward(ps, enc, p))
    return check_grads(fn, leaves)


def _check_seg_loss(seed):
    rng = np.random.default_rng(seed)
    sizes = (4, 6, 8, 12, 12)
    n_classes = 3
    logits = [T.Tensor(rng.standard_normal((n, n_classes)), requires_grad=True)
              for n in sizes]
    base = np.arange(12)
    idx = [rng.choice(12, size=n, replace=False) if n < 12 else base
           for n in sizes]
    out = netmod.MultiScaleOutput(list(logits), idx)
    labels = rng.integers(0, n_classes, 12)

    def fn():
        return netmod.seg_loss(out, labels, (1.0, 2.0, 2.0, 2.0, 2.0))

    return check_grads(fn, logits)


def _check_network(seed):
    """Composite check: finite differences on a random sample of
    parameter coordinates through the whole forward + loss."""
    rng = np.random.default_rng(seed)
    cfg = netmod.NetworkConfig(
        n_classes=3, input_feat_dim=2, n_input_points=32,
        level_sizes=(32, 16, 8, 4), map_specs=((4, 4), (3, 3), (2, 2), (2, 2)),
        volume_spec=(3, 3, 2), channel_widths=(6, 8, 10, 12),
        k_c=2, k_s=2, knn_sizes=(2, 3, 4))
    state = netmod.build_network(cfg, seed=seed)
    for name, t in state.named_parameters():
        if "offset_head.weight" in name:
            t.data[:] = 0.02 * rng.standard_normal(t.shape)
    ps = geom.PointSet(rng.random((32, 3)),
                       T.Tensor(rng.standard_normal((32, 2)), requires_grad=True),
                       rng.integers(0, 3, 32))
    params = [ps.feats] + state.parameters()

    def fn():
        return netmod.seg_loss(netmod.forward(ps, state), ps.labels,
                               cfg.loss_weights)

    ana = analytic_grads(fn, params)
    flat_sizes = [p.data.size for p in params]
    total = sum(flat_sizes)
    picks = rng.choice(total, size=min(24, total), replace=False)
    offsets = np.cumsum([0] + flat_sizes)
    h = DEFAULT_H
    worst = 0.0
    for pick in np.sort(picks):
        which = int(np.searchsorted(offsets, pick, side="right")) - 1
        local = int(pick - offsets[which])
        flat = params[which].data.reshape(-1)
        orig = flat[local]
        flat[local] = orig + h
        f1 = fn().item()
        flat[local] = orig - h
        f2 = fn().item()
        flat[local] = orig
        num = (f1 - f2) / (2.0 * h)
        a = ana[which].reshape(-1)[local]
        worst = max(worst, abs(a - num) / max(1.0, abs(a), abs(num)))
    return worst


SUITE: list[tuple[str, Callable[[int], float], float]] = [
    ("linear", _check_linear, OP_TOL),
    ("batch_norm", _check_batch_norm, OP_TOL),
    ("relu", _check_relu, OP_TOL),
    ("sigmoid", _check_sigmoid, OP_TOL),
    ("concat", _check_concat, OP_TOL),
    ("grid_sample_2d/values", _check_grid_sample_2d_values, OP_TOL),
    ("grid_sample_2d/coords", _check_grid_sample_2d_coords, OP_TOL),
    ("grid_sample_3d/values", _check_grid_sample_3d_values, OP_TOL),
    ("grid_sample_3d/coords", _check_grid_sample_3d_coords, OP_TOL),
    ("cylindricize/features", _check_cylindricize, OP_TOL),
    ("spheroidize/features", _check_spheroidize, OP_TOL),
    ("interpolate_3nn", _check_interpolate_3nn, OP_TOL),
    ("cydconv_layer", _check_cydconv, OP_TOL),
    ("spdconv_layer", _check_spdconv, OP_TOL),
    ("seg_loss", _check_seg_loss, OP_TOL),
    ("network_composite", _check_network, NETWORK_TOL),
]


def run_suite(n_seeds: int = 20, ops: Sequence[str] | None = None
              ) -> list[tuple[str, float, float]]:
    """Run every registered check over ``n_seeds`` seeds; returns
    (op name, max relative error, tolerance) triples."""
    results = []
    for name, check, tol in SUITE:
        if ops is not None and name not in ops:
            continue
        worst = max(check(seed) for seed in range(n_seeds))
        results.append((name, worst, tol))
    return results

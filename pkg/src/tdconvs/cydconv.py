"""Cylinder-wise deformable point convolution.

Each point predicts K_c planar offsets from its own coordinates and
features, samples the mean-pooled cylinder map at (own xy + learnable
reference jitter + offset), aggregates the samples with learned raw
weights plus a residual, and fuses the result with multi-scale
nearest-neighbor features (MFL). Offset heads start at exactly zero so
the layer begins as a non-deformed sampler.
"""

from __future__ import annotations

import numpy as np

from .errors import DimensionError
from .geom import CylinderMap, GridSpec2D, PointSet, cylindricize, grid_sample_2d, group, knn
from .tensor import (BatchNormParams, LinearParams, Tensor, batch_norm, concat,
                     linear, maximum, relu, reshape, softmax)


class CyDConvParams:
    def __init__(self, offset_head: LinearParams, weight_head: LinearParams,
                 agg_proj: LinearParams, ref_base: Tensor,
                 mfl_projs: list[LinearParams], fuse_proj: LinearParams,
                 fuse_bn: BatchNormParams, k_c: int,
                 knn_sizes: tuple[int, int, int], grid: GridSpec2D,
                 softmax_weights: bool = False):
        self.offset_head = offset_head
        self.weight_head = weight_head
        self.agg_proj = agg_proj
        self.ref_base = ref_base
        self.mfl_projs = mfl_projs
        self.fuse_proj = fuse_proj
        self.fuse_bn = fuse_bn
        self.k_c = k_c
        self.knn_sizes = knn_sizes
        self.grid = grid
        self.softmax_weights = softmax_weights

    @classmethod
    def create(cls, rng: np.random.Generator, in_dim: int, out_dim: int,
               grid: GridSpec2D, k_c: int = 4,
               knn_sizes: tuple[int, int, int] = (16, 32, 64),
               neighbor_dim: int | None = None,
               softmax_weights: bool = False) -> "CyDConvParams":
        if neighbor_dim is None:
            neighbor_dim = max(out_dim // 2, 1)
        point_dim = 3 + in_dim
        # reference points jitter within half a cell per axis
        ref = np.stack([
            rng.uniform(-0.5 / grid.h, 0.5 / grid.h, size=k_c),
            rng.uniform(-0.5 / grid.w, 0.5 / grid.w, size=k_c),
        ], axis=1)
        return cls(
            offset_head=LinearParams.create(rng, point_dim, k_c * 2, zero_init=True),
            weight_head=LinearParams.create(rng, point_dim, k_c),
            agg_proj=LinearParams.create(rng, in_dim, in_dim),
            ref_base=Tensor(ref, requires_grad=True),
            mfl_projs=[LinearParams.create(rng, point_dim, neighbor_dim)
                       for _ in range(3)],
            fuse_proj=LinearParams.create(rng, 3 * neighbor_dim + in_dim, out_dim),
            fuse_bn=BatchNormParams.create(out_dim),
            k_c=k_c, knn_sizes=tuple(knn_sizes), grid=grid,
            softmax_weights=softmax_weights)

    @property
    def in_dim(self) -> int:
        return self.agg_proj.in_dim

    @property
    def out_dim(self) -> int:
        return self.fuse_proj.out_dim

    def named(self, prefix: str):
        yield from self.offset_head.named(f"{prefix}.offset_head")
        yield from self.weight_head.named(f"{prefix}.weight_head")
        yield from self.agg_proj.named(f"{prefix}.agg_proj")
        yield f"{prefix}.ref_base", self.ref_base
        for i, p in enumerate(self.mfl_projs):
            yield from p.named(f"{prefix}.mfl_proj{i}")
        yield from self.fuse_proj.named(f"{prefix}.fuse_proj")
        yield from self.fuse_bn.named(f"{prefix}.fuse_bn")

    def named_stats(self, prefix: str):
        yield from self.fuse_bn.named_stats(f"{prefix}.fuse_bn")


def _point_descriptor(ps: PointSet) -> Tensor:
    return concat([Tensor(ps.coords), ps.feats], axis=1)


def predict_offsets_2d(ps: PointSet, p: CyDConvParams) -> Tensor:
    """Planar offsets [N, K_c, 2]; exactly zero at initialization."""
    off = linear(_point_descriptor(ps), p.offset_head)
    return reshape(off, (ps.n, p.k_c, 2))


def predict_weights_2d(ps: PointSet, p: CyDConvParams) -> Tensor:
    """Aggregation weights [N, K_c], raw by default (no normalization)."""
    w = linear(_point_descriptor(ps), p.weight_head)
    return softmax(w, axis=1) if p.softmax_weights else w


def sample_points_2d(ps: PointSet, offsets: Tensor, p: CyDConvParams) -> Tensor:
    """Sampling coordinates [N, K_c, 2]: own xy projection + reference
    point + predicted offset."""
    anchor = Tensor(ps.coords[:, None, :2])
    return anchor + p.ref_base + offsets


def aggregate_map_features(ps: PointSet, cmap: CylinderMap,
                           p: CyDConvParams) -> Tensor:
    """Sampled-map aggregation with residual: proj(F + sum_k w_k * F_o,k)."""
    m = cmap.values.shape[-1]
    if m != ps.feat_dim:
        raise DimensionError(
            f"map feature dim {m} != point feature dim {ps.feat_dim}; "
            "the residual sum needs addable shapes")
    offsets = predict_offsets_2d(ps, p)
    weights = predict_weights_2d(ps, p)
    coords = sample_points_2d(ps, offsets, p)
    sampled = grid_sample_2d(cmap, coords)                       # [N, K_c, M]
    weighted = (reshape(weights, (ps.n, p.k_c, 1)) * sampled).sum(axis=1)
    return linear(ps.feats + weighted, p.agg_proj)


def mfl(ps: PointSet, p: CyDConvParams) -> list[Tensor]:
    """Multi-nearest-neighbor feature learning: per scale, KNN grouping,
    shared linear, then max-pool over the neighbor axis. Neighbor counts
    are clamped to N for small point sets."""
    outs = []
    for size, proj in zip(p.knn_sizes, p.mfl_projs):
        idx = knn(ps, min(size, ps.n))
        grouped = group(ps, idx)                                  # [N, T, 3+M]
        outs.append(maximum(linear(grouped, proj), axis=1))       # [N, M_n]
    return outs


def cydconv_forward(ps: PointSet, p: CyDConvParams) -> Tensor:
    """Full layer: rasterize, sample-aggregate, MFL, then
    ReLU(BN(Linear(cat(F_N1, F_N2, F_N3, F_a))))."""
    cmap = cylindricize(ps, p.grid)
    f_a = aggregate_map_features(ps, cmap, p)
    branches = mfl(ps, p) + [f_a]
    fused = linear(concat(branches, axis=1), p.fuse_proj)
    return relu(batch_norm(fused, p.fuse_bn))

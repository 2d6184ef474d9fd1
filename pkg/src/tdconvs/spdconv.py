"""Sphere-wise deformable point convolution (skip-connection layer).

3D analogue of the cylinder layer, applied where encoder features meet
the decoder stream: each point samples a sphere-cell volume at learned
3D offsets, aggregates with raw weights plus a residual (no outer linear
here, unlike the cylinder aggregation), and fuses with the encoder
features. A disabled switch turns the layer into a plain skip
(concat + Linear + BN + ReLU) with the same fusion parameters.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError, DimensionError
from .geom import GridSpec3D, PointSet, SphereVolume, grid_sample_3d, spheroidize
from .tensor import (BatchNormParams, LinearParams, Tensor, batch_norm, concat,
                     linear, relu, reshape, softmax)


class SpDConvParams:
    def __init__(self, offset_head: LinearParams | None,
                 weight_head: LinearParams | None, ref_base: Tensor | None,
                 fuse_proj: LinearParams, fuse_bn: BatchNormParams,
                 k_s: int, grid: GridSpec3D, enabled: bool,
                 softmax_weights: bool = False):
        self.offset_head = offset_head
        self.weight_head = weight_head
        self.ref_base = ref_base
        self.fuse_proj = fuse_proj
        self.fuse_bn = fuse_bn
        self.k_s = k_s
        self.grid = grid
        self.enabled = enabled
        self.softmax_weights = softmax_weights

    @classmethod
    def create(cls, rng: np.random.Generator, in_dim: int, enc_dim: int,
               out_dim: int, grid: GridSpec3D, k_s: int = 8,
               enabled: bool = True, softmax_weights: bool = False) -> "SpDConvParams":
        offset_head = weight_head = ref_base = None
        if enabled:
            point_dim = 3 + in_dim
            offset_head = LinearParams.create(rng, point_dim, k_s * 3, zero_init=True)
            weight_head = LinearParams.create(rng, point_dim, k_s)
            ref = np.stack([
                rng.uniform(-0.5 / grid.h, 0.5 / grid.h, size=k_s),
                rng.uniform(-0.5 / grid.w, 0.5 / grid.w, size=k_s),
                rng.uniform(-0.5 / grid.z, 0.5 / grid.z, size=k_s),
            ], axis=1)
            ref_base = Tensor(ref, requires_grad=True)
        return cls(offset_head, weight_head, ref_base,
                   fuse_proj=LinearParams.create(rng, enc_dim + in_dim, out_dim),
                   fuse_bn=BatchNormParams.create(out_dim),
                   k_s=k_s, grid=grid, enabled=enabled,
                   softmax_weights=softmax_weights)

    def named(self, prefix: str):
        if self.enabled:
            yield from self.offset_head.named(f"{prefix}.offset_head")
            yield from self.weight_head.named(f"{prefix}.weight_head")
            yield f"{prefix}.ref_base", self.ref_base
        yield from self.fuse_proj.named(f"{prefix}.fuse_proj")
        yield from self.fuse_bn.named(f"{prefix}.fuse_bn")

    def named_stats(self, prefix: str):
        yield from self.fuse_bn.named_stats(f"{prefix}.fuse_bn")


def _point_descriptor(ps: PointSet) -> Tensor:
    return concat([Tensor(ps.coords), ps.feats], axis=1)


def predict_offsets_3d(ps: PointSet, p: SpDConvParams) -> Tensor:
    """3D offsets [N, K_s, 3]; exactly zero at initialization."""
    off = linear(_point_descriptor(ps), p.offset_head)
    return reshape(off, (ps.n, p.k_s, 3))


def predict_weights_3d(ps: PointSet, p: SpDConvParams) -> Tensor:
    w = linear(_point_descriptor(ps), p.weight_head)
    return softmax(w, axis=1) if p.softmax_weights else w


def aggregate_volume_features(ps: PointSet, vol: SphereVolume,
                              p: SpDConvParams) -> Tensor:
    """F + sum_k w_k * F_o,k at (own xyz + reference + offset). The
    residual has no outer linear, so with zero weights the features pass
    through exactly."""
    m = vol.values.shape[-1]
    if m != ps.feat_dim:
        raise DimensionError(
            f"volume feature dim {m} != point feature dim {ps.feat_dim}")
    offsets = predict_offsets_3d(ps, p)
    weights = predict_weights_3d(ps, p)
    coords = Tensor(ps.coords[:, None, :]) + p.ref_base + offsets
    sampled = grid_sample_3d(vol, coords)                        # [N, K_s, M]
    weighted = (reshape(weights, (ps.n, p.k_s, 1)) * sampled).sum(axis=1)
    return ps.feats + weighted


def spdconv_forward(ps_decoder: PointSet, feats_encoder: Tensor,
                    p: SpDConvParams) -> Tensor:
    """Skip fusion ReLU(BN(Linear(cat(F_h, F_s)))). With the switch off,
    F_s is simply the decoder features (plain skip path)."""
    if feats_encoder.shape[0] != ps_decoder.n:
        raise ContractError(
            f"encoder rows {feats_encoder.shape[0]} != decoder point count "
            f"{ps_decoder.n}")
    if p.enabled:
        vol = spheroidize(ps_decoder, p.grid)
        f_s = aggregate_volume_features(ps_decoder, vol, p)
    else:
        f_s = ps_decoder.feats
    fused = linear(concat([feats_encoder, f_s], axis=1), p.fuse_proj)
    return relu(batch_norm(fused, p.fuse_bn))

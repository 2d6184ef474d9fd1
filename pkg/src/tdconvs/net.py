"""Encoder-decoder segmentation network.

Four cylinder-convolution encoder levels with farthest-point downsampling
between them, a feature-propagation decoder (3-NN interpolation + skip
fusion), the sphere-convolution layer on the highest-resolution skip
path, and deep supervision: classification heads at every decoder
resolution plus a final full-resolution head, trained with per-class
binary cross-entropy against labels carried along the sampling chain.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cydconv import CyDConvParams, cydconv_forward
from .errors import ConfigError, ContractError, DataError
from .geom import GridSpec2D, GridSpec3D, PointSet, fps, interpolate_3nn
from .spdconv import SpDConvParams, spdconv_forward
from .tensor import (AdamState, LinearParams, Tensor, adam_step, backward,
                     clamp, linear, log, sigmoid, tsum)

LOGIT_CLAMP = 1e-7


@dataclass
class NetworkConfig:
    n_classes: int
    input_feat_dim: int
    n_input_points: int = 4096
    level_sizes: tuple[int, ...] = (4096, 1024, 256, 64)
    map_specs: tuple[tuple[int, int], ...] = ((40, 40), (20, 20), (10, 10), (5, 5))
    volume_spec: tuple[int, int, int] = (40, 40, 5)
    channel_widths: tuple[int, ...] = (64, 128, 256, 512)
    k_c: int = 4
    k_s: int = 8
    knn_sizes: tuple[int, int, int] = (16, 32, 64)
    loss_weights: tuple[float, ...] = (1.0, 2.0, 2.0, 2.0, 2.0)
    spdconv_enabled: bool = True
    softmax_weights: bool = False

    def __post_init__(self):
        if self.n_classes < 2:
            raise ConfigError("n_classes must be at least 2")
        if self.input_feat_dim < 1:
            raise ConfigError("input_feat_dim must be at least 1")
        if len(self.level_sizes) != 4:
            raise ConfigError("level_sizes must list exactly 4 levels")
        if len(self.map_specs) != 4:
            raise ConfigError("map_specs must list exactly 4 grids")
        if len(self.channel_widths) != 4:
            raise ConfigError("channel_widths must list exactly 4 widths")
        if len(self.volume_spec) != 3:
            raise ConfigError("volume_spec must be (h, w, z)")
        if len(self.knn_sizes) != 3:
            raise ConfigError("knn_sizes must list exactly 3 scales")
        if self.level_sizes[0] != self.n_input_points:
            raise ConfigError("level_sizes[0] must equal n_input_points")
        if any(a <= b for a, b in zip(self.level_sizes, self.level_sizes[1:])):
            raise ConfigError("level_sizes must be strictly decreasing")
        if len(self.loss_weights) != 5:
            raise ConfigError("loss_weights must list exactly 5 values")


@dataclass
class MultiScaleOutput:
    """Logits at point counts [64, 256, 1024, 4096] plus the final
    full-resolution head, with index arrays mapping each scale back into
    the input point set."""

    logits: list[Tensor]
    point_indices: list[np.ndarray]


class NetworkState:
    def __init__(self, cfg: NetworkConfig, encoders: list[CyDConvParams],
                 fuse_stages: list[SpDConvParams], heads: list[LinearParams]):
        self.cfg = cfg
        self.encoders = encoders
        self.fuse_stages = fuse_stages
        self.heads = heads

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = []
        for i, enc in enumerate(self.encoders):
            out.extend(enc.named(f"encoder{i}"))
        for i, st in enumerate(self.fuse_stages):
            out.extend(st.named(f"decoder{i}"))
        for i, h in enumerate(self.heads):
            out.extend(h.named(f"head{i}"))
        return out

    def named_stats(self) -> list[tuple[str, np.ndarray]]:
        out = []
        for i, enc in enumerate(self.encoders):
            out.extend(enc.named_stats(f"encoder{i}"))
        for i, st in enumerate(self.fuse_stages):
            out.extend(st.named_stats(f"decoder{i}"))
        return out

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def param_count(self) -> int:
        return sum(t.data.size for _, t in self.named_parameters())

    def set_training(self, flag: bool) -> None:
        for enc in self.encoders:
            enc.fuse_bn.training = flag
        for st in self.fuse_stages:
            st.fuse_bn.training = flag

    def to_checkpoint(self) -> dict[str, np.ndarray]:
        entries = {name: t.data for name, t in self.named_parameters()}
        entries.update({name: arr for name, arr in self.named_stats()})
        return entries

    def load_entries(self, entries: dict[str, np.ndarray]) -> None:
        for name, t in self.named_parameters():
            if name not in entries:
                raise DataError(f"checkpoint is missing parameter {name}")
            if entries[name].shape != t.data.shape:
                raise DataError(
                    f"checkpoint shape mismatch for {name}: "
                    f"{entries[name].shape} vs {t.data.shape}")
            t.data[...] = entries[name]
        for name, arr in self.named_stats():
            if name not in entries:
                raise DataError(f"checkpoint is missing statistic {name}")
            arr[...] = entries[name]


def build_network(cfg: NetworkConfig, seed: int) -> NetworkState:
    """Allocate and initialize all parameters; deterministic in the seed."""
    rng = np.random.default_rng(seed)
    widths = cfg.channel_widths
    in_dims = (cfg.input_feat_dim,) + widths[:3]
    encoders = [
        CyDConvParams.create(
            rng, in_dims[i], widths[i],
            GridSpec2D(*cfg.map_specs[i]), k_c=cfg.k_c,
            knn_sizes=cfg.knn_sizes, softmax_weights=cfg.softmax_weights)
        for i in range(4)
    ]
    # decoder stages coarse to fine; only the last (highest resolution)
    # carries the deformable sphere sampler. Stage widths stay wide at
    # high resolution, like PointNet++ feature propagation.
    dec_out = (widths[2], widths[1], widths[1])
    dec_in = (widths[3], dec_out[0], dec_out[1])
    dec_enc = (widths[2], widths[1], widths[0])
    fuse_stages = [
        SpDConvParams.create(
            rng, in_dim=dec_in[i], enc_dim=dec_enc[i], out_dim=dec_out[i],
            grid=GridSpec3D(*cfg.volume_spec), k_s=cfg.k_s,
            enabled=(i == 2 and cfg.spdconv_enabled),
            softmax_weights=cfg.softmax_weights)
        for i in range(3)
    ]
    head_dims = (widths[3],) + dec_out + (dec_out[2],)
    heads = [LinearParams.create(rng, d, cfg.n_classes) for d in head_dims]
    return NetworkState(cfg, encoders, fuse_stages, heads)


def encoder_forward(ps: PointSet, state: NetworkState
                    ) -> tuple[list[PointSet], list[np.ndarray]]:
    """Run the four cylinder-convolution levels; level 1 sees all input
    points, deeper levels first subsample by FPS. Returns per-level point
    sets (with convolved features) and their index chains into the input."""
    cfg = state.cfg
    if ps.n != cfg.n_input_points:
        raise ContractError(
            f"encoder expects {cfg.n_input_points} points, got {ps.n}")
    levels: list[PointSet] = []
    chains: list[np.ndarray] = []
    cur = ps
    indices = np.arange(ps.n)
    for i in range(4):
        if i > 0:
            sel = fps(cur, cfg.level_sizes[i])
            cur = cur.subset(sel)
            indices = indices[sel]
        feats = cydconv_forward(cur, state.encoders[i])
        cur = PointSet(cur.coords, feats, cur.labels)
        levels.append(cur)
        chains.append(indices)
    return levels, chains


def decoder_forward(levels: list[PointSet], chains: list[np.ndarray],
                    state: NetworkState) -> MultiScaleOutput:
    """Feature propagation 64 -> 256 -> 1024 -> 4096 with skip fusion at
    each stage (the top stage through the sphere layer), a classification
    head per stage and a final head on the top features."""
    heads = state.heads
    d = levels[3].feats
    logits = [linear(d, heads[0])]
    point_idx = [chains[3]]
    src = PointSet(levels[3].coords, d)
    for stage, lvl in enumerate((2, 1, 0)):
        target = levels[lvl]
        upsampled = interpolate_3nn(src, target.coords)
        d = spdconv_forward(PointSet(target.coords, upsampled), target.feats,
                            state.fuse_stages[stage])
        logits.append(linear(d, heads[stage + 1]))
        point_idx.append(chains[lvl])
        src = PointSet(target.coords, d)
    logits.append(linear(d, heads[4]))
    point_idx.append(chains[0])
    return MultiScaleOutput(logits, point_idx)


def forward(ps: PointSet, state: NetworkState) -> MultiScaleOutput:
    levels, chains = encoder_forward(ps, state)
    return decoder_forward(levels, chains, state)


def seg_loss_terms(out: MultiScaleOutput, labels: np.ndarray) -> list[Tensor]:
    """Per-scale mean per-class binary cross-entropy (unweighted)."""
    terms = []
    n_classes = out.logits[0].shape[1]
    bad = (labels < 0) | (labels >= n_classes)
    if bad.any():
        i = int(np.argmax(bad))
        raise DataError(f"label {labels[i]} out of range [0, {n_classes}) "
                        f"at point {i}")
    for logit, idx in zip(out.logits, out.point_indices):
        lbl = labels[idx]
        onehot = np.zeros(logit.shape)
        onehot[np.arange(lbl.shape[0]), lbl] = 1.0
        a = Tensor(onehot)
        s = clamp(sigmoid(logit), LOGIT_CLAMP, 1.0 - LOGIT_CLAMP)
        ll = a * log(s) + (1.0 - a) * log(1.0 - s)
        terms.append(tsum(ll) * (-1.0 / lbl.shape[0]))
    return terms


def _weighted_total(terms: list[Tensor], weights: tuple[float, ...]) -> Tensor:
    # the first configured weight belongs to the final head; the rest to
    # the decoder stages from coarsest to finest
    per_output = list(weights[1:]) + [weights[0]]
    total = terms[0] * per_output[0]
    for w, t in zip(per_output[1:], terms[1:]):
        total = total + t * w
    return total


def seg_loss(out: MultiScaleOutput, labels: np.ndarray,
             weights: tuple[float, ...]) -> Tensor:
    """Weighted deep-supervision loss. The first configured weight applies
    to the final full-resolution head; the remaining four apply to the
    decoder stages from coarsest to finest."""
    if len(weights) != len(out.logits):
        raise ContractError(
            f"{len(weights)} loss weights for {len(out.logits)} outputs")
    return _weighted_total(seg_loss_terms(out, labels), weights)


def predict(ps: PointSet, state: NetworkState) -> np.ndarray:
    """Class per point from the final head (eval-mode batch norm);
    lowest class index wins exact ties."""
    was_training = state.encoders[0].fuse_bn.training
    state.set_training(False)
    try:
        out = forward(ps, state)
    finally:
        state.set_training(was_training)
    return np.argmax(out.logits[-1].data, axis=1)


class Trainer:
    """Adam over the full parameter list with a fixed registration order,
    so training runs are bit-reproducible."""

    def __init__(self, state: NetworkState, lr: float,
                 loss_weights: tuple[float, ...] | None = None):
        self.state = state
        self.lr = lr
        self.loss_weights = tuple(loss_weights or state.cfg.loss_weights)
        self.named = state.named_parameters()
        self.params = [t for _, t in self.named]
        self.names = [n for n, _ in self.named]
        self.adam = AdamState(self.params)

    def step(self, batch: list[PointSet]) -> tuple[float, list[float]]:
        """Forward/backward over a batch of point sets, one Adam update.
        Returns (total loss, unweighted per-scale losses), averaged over
        the batch."""
        self.state.set_training(True)
        for p in self.params:
            p.zero_grad()
        total = None
        scale_acc = np.zeros(5)
        for ps in batch:
            if ps.labels is None:
                raise ContractError("training requires labeled point sets")
            out = forward(ps, self.state)
            terms = seg_loss_terms(out, ps.labels)
            scale_acc += [t.item() for t in terms]
            loss = _weighted_total(terms, self.loss_weights)
            total = loss if total is None else total + loss
        total = total * (1.0 / len(batch))
        backward(total)
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data)
                 for p in self.params]
        adam_step(self.params, grads, self.adam, self.lr, names=self.names)
        return total.item(), list(scale_acc / len(batch))

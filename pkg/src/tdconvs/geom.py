"""Spatial primitives: grid construction, cylinder/sphere rasterization,
differentiable grid sampling, KNN, farthest point sampling, grouping and
3-NN feature interpolation.

Coordinate convention (stated once, used everywhere): patch coordinates
are normalized to [0,1]^3 with x = latitude axis, y = longitude axis,
z = altitude. A (h, w) grid partitions the unit square into uniform cells
with centers at ((i+0.5)/h, (j+0.5)/w); continuous sampling index is
u = x*h - 0.5 so that a query at a cell center reproduces that cell's
stored value exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import ContractError
from .tensor import Tensor, concat, gather_rows, make_node

EPS_INTERP = 1e-8


@dataclass
class PointSet:
    """N points: coords [N,3], features [N,M] (a Tensor so gradients can
    flow), optional integer labels in [0, C)."""

    coords: np.ndarray
    feats: Tensor
    labels: np.ndarray | None = None

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.float64)
        if not isinstance(self.feats, Tensor):
            self.feats = Tensor(self.feats)
        if self.coords.ndim != 2 or self.coords.shape[1] != 3:
            raise ContractError(f"coords must be [N,3], got {self.coords.shape}")
        if self.coords.shape[0] < 1:
            raise ContractError("a point set needs at least one point")
        if self.feats.shape[0] != self.coords.shape[0]:
            raise ContractError(
                f"feature rows {self.feats.shape[0]} != point count {self.coords.shape[0]}")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)

    @property
    def n(self) -> int:
        return self.coords.shape[0]

    @property
    def feat_dim(self) -> int:
        return self.feats.shape[1]

    def subset(self, idx: np.ndarray) -> "PointSet":
        labels = self.labels[idx] if self.labels is not None else None
        return PointSet(self.coords[idx], gather_rows(self.feats, idx), labels)


@dataclass
class GridSpec2D:
    h: int
    w: int
    radius: float = 0.0

    def __post_init__(self):
        if self.h < 1 or self.w < 1:
            raise ContractError(f"grid must be at least 1x1, got {self.h}x{self.w}")
        if self.radius <= 0.0:
            self.radius = half_diagonal_2d(self.h, self.w)


@dataclass
class GridSpec3D:
    h: int
    w: int
    z: int
    radius: float = 0.0

    def __post_init__(self):
        if self.h < 1 or self.w < 1 or self.z < 1:
            raise ContractError(
                f"grid must be at least 1x1x1, got {self.h}x{self.w}x{self.z}")
        if self.radius <= 0.0:
            self.radius = half_diagonal_3d(self.h, self.w, self.z)


@dataclass
class CylinderMap:
    values: Tensor          # [h, w, M]
    counts: np.ndarray      # [h, w]
    spec: GridSpec2D


@dataclass
class SphereVolume:
    values: Tensor          # [h, w, z, M]
    counts: np.ndarray      # [h, w, z]
    spec: GridSpec3D


def half_diagonal_2d(h: int, w: int) -> float:
    # default base radius: guarantees every point is covered by >= 1 cell
    return 0.5 * np.sqrt((1.0 / h) ** 2 + (1.0 / w) ** 2)


def half_diagonal_3d(h: int, w: int, z: int) -> float:
    return 0.5 * np.sqrt((1.0 / h) ** 2 + (1.0 / w) ** 2 + (1.0 / z) ** 2)


def grid_arrange(h: int, w: int) -> np.ndarray:
    """Cell centers [h, w, 2] of a uniform partition of the unit square."""
    ci = (np.arange(h) + 0.5) / h
    cj = (np.arange(w) + 0.5) / w
    out = np.empty((h, w, 2))
    out[:, :, 0] = ci[:, None]
    out[:, :, 1] = cj[None, :]
    return out


def grid_arrange_3d(h: int, w: int, z: int) -> np.ndarray:
    ci = (np.arange(h) + 0.5) / h
    cj = (np.arange(w) + 0.5) / w
    ck = (np.arange(z) + 0.5) / z
    out = np.empty((h, w, z, 3))
    out[:, :, :, 0] = ci[:, None, None]
    out[:, :, :, 1] = cj[None, :, None]
    out[:, :, :, 2] = ck[None, None, :]
    return out


def cylindricize(ps: PointSet, spec: GridSpec2D) -> CylinderMap:
    """Mean-pool features of each cylinder (points whose xy projection lies
    strictly within `radius` of the cell center). Empty cells stay zero.
    Gradient flows back to features (1/count per member); none to coords.
    """
    ptr, members = kernels.members_2d(
        ps.coords[:, :2], spec.h, spec.w, spec.radius)
    flat, counts = kernels.scatter_mean_fwd(ptr, members, ps.feats.data)
    m = ps.feat_dim
    feats = ps.feats

    def bw(g):
        grad = kernels.scatter_mean_bwd(
            ptr, members, counts, g.reshape(-1, m), ps.n)
        return [grad]

    values = make_node(flat.reshape(spec.h, spec.w, m), (feats,), bw)
    return CylinderMap(values, counts.reshape(spec.h, spec.w), spec)


def spheroidize(ps: PointSet, spec: GridSpec3D) -> SphereVolume:
    """3D analogue of cylindricize using full xyz distance to the sphere
    centers."""
    ptr, members = kernels.members_3d(
        ps.coords, spec.h, spec.w, spec.z, spec.radius)
    flat, counts = kernels.scatter_mean_fwd(ptr, members, ps.feats.data)
    m = ps.feat_dim
    feats = ps.feats

    def bw(g):
        grad = kernels.scatter_mean_bwd(
            ptr, members, counts, g.reshape(-1, m), ps.n)
        return [grad]

    values = make_node(flat.reshape(spec.h, spec.w, spec.z, m), (feats,), bw)
    return SphereVolume(values, counts.reshape(spec.h, spec.w, spec.z), spec)


def _as_coord_tensor(coords) -> Tensor:
    c = coords if isinstance(coords, Tensor) else Tensor(coords)
    if np.isnan(c.data).any():
        raise ContractError("NaN in sampling coordinates")
    return c


def grid_sample_2d(cmap: CylinderMap, coords) -> Tensor:
    """Bilinear sampling of the map at normalized plane coordinates
    [N, K, 2], border-clamped. Differentiable wrt both the map values and
    the coordinates (zero coordinate gradient where clamped)."""
    coords = _as_coord_tensor(coords)
    if coords.ndim != 3 or coords.shape[2] != 2:
        raise ContractError(f"expected [N,K,2] coordinates, got {list(coords.shape)}")
    n, k, _ = coords.shape
    values = cmap.values
    h, w, m = values.shape
    flat = coords.data.reshape(-1, 2)
    u = flat[:, 0] * h - 0.5
    v = flat[:, 1] * w - 0.5
    out = kernels.bilinear_fwd(values.data, u, v)

    def bw(g):
        g2 = g.reshape(-1, m)
        g_values = None
        g_coords = None
        if values.requires_grad:
            g_values = kernels.bilinear_bwd_values((h, w, m), u, v, g2)
        if coords.requires_grad:
            gu, gv = kernels.bilinear_bwd_coords(values.data, u, v, g2)
            g_coords = np.stack([gu * h, gv * w], axis=1).reshape(n, k, 2)
        return [g_values, g_coords]

    return make_node(out.reshape(n, k, m), (values, coords), bw)


def grid_sample_3d(vol: SphereVolume, coords) -> Tensor:
    """Trilinear analogue of grid_sample_2d over [N, K, 3] coordinates."""
    coords = _as_coord_tensor(coords)
    if coords.ndim != 3 or coords.shape[2] != 3:
        raise ContractError(f"expected [N,K,3] coordinates, got {list(coords.shape)}")
    n, k, _ = coords.shape
    values = vol.values
    h, w, z, m = values.shape
    flat = coords.data.reshape(-1, 3)
    u = flat[:, 0] * h - 0.5
    v = flat[:, 1] * w - 0.5
    t = flat[:, 2] * z - 0.5

    out = kernels.trilinear_fwd(values.data, u, v, t)

    def bw(g):
        g2 = g.reshape(-1, m)
        g_values = None
        g_coords = None
        if values.requires_grad:
            g_values = kernels.trilinear_bwd_values((h, w, z, m), u, v, t, g2)
        if coords.requires_grad:
            gu, gv, gt = kernels.trilinear_bwd_coords(values.data, u, v, t, g2)
            g_coords = np.stack([gu * h, gv * w, gt * z], axis=1).reshape(n, k, 3)
        return [g_values, g_coords]

    return make_node(out.reshape(n, k, m), (values, coords), bw)


def knn(ps: PointSet, k: int) -> np.ndarray:
    """Indices [N, k] of each point's nearest neighbors (self included),
    sorted ascending by (distance, index)."""
    if k > ps.n:
        raise ContractError(f"knn: k={k} exceeds point count {ps.n}")
    return kernels.knn_query(ps.coords, ps.coords, k)


def fps(ps: PointSet, n: int) -> np.ndarray:
    """Farthest point sampling. Starts from the point farthest from the
    centroid (lowest index on ties), then greedily maximizes the minimum
    distance to the chosen set."""
    if not 1 <= n <= ps.n:
        raise ContractError(f"fps: n={n} outside [1, {ps.n}]")
    centroid = ps.coords.mean(axis=0)
    d2 = ((ps.coords - centroid) ** 2).sum(axis=1)
    start = int(np.argmax(d2))
    return kernels.fps(ps.coords, start, n)


def group(ps: PointSet, neighbor_idx: np.ndarray) -> Tensor:
    """Per neighbor: concat(relative coords, neighbor features), shape
    [N, k, 3+M]. Relative coords are constants; features carry gradient."""
    idx = np.asarray(neighbor_idx)
    if idx.size and (idx.min() < 0 or idx.max() >= ps.n):
        raise ContractError(
            f"group: neighbor index out of range [0, {ps.n})")
    rel = ps.coords[idx] - ps.coords[:, None, :]
    gathered = gather_rows(ps.feats, idx)
    return concat([Tensor(rel), gathered], axis=2)


def interpolate_3nn(src: PointSet, dst_coords: np.ndarray) -> Tensor:
    """Inverse-distance weighted average of the 3 nearest source features
    at each destination coordinate. Fewer than 3 source points are padded
    by repetition. Differentiable wrt the source features."""
    dst = np.asarray(dst_coords, dtype=np.float64)
    kk = min(3, src.n)
    idx = kernels.knn_query(dst, src.coords, kk)
    if kk < 3:
        idx = np.concatenate([idx] + [idx[:, -1:]] * (3 - kk), axis=1)
    d = np.sqrt(((dst[:, None, :] - src.coords[idx]) ** 2).sum(axis=2))
    w = 1.0 / (d + EPS_INTERP)
    w = w / w.sum(axis=1, keepdims=True)
    feats = src.feats
    out = (w[:, :, None] * feats.data[idx]).sum(axis=1)

    def bw(g):
        gx = np.zeros_like(feats.data)
        np.add.at(gx, idx.ravel(), (w[:, :, None] * g[:, None, :]).reshape(-1, g.shape[-1]))
        return [gx]

    return make_node(out, (feats,), bw)

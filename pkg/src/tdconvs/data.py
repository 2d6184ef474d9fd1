"""Data pipeline: ASCII point file IO, patch tiling, normalization,
fixed-size sampling, synthetic scene generation and the binary patch
cache. All randomized steps are pure functions of (inputs, seed).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, DataError
from .geom import PointSet
from .tensor import Tensor

ROLES = ("x", "y", "z", "feature", "label", "ignore")


@dataclass
class ColumnSchema:
    """Ordered column roles for whitespace-separated ASCII point files."""

    columns: list[str]
    n_classes: int
    class_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        for role in self.columns:
            if role not in ROLES:
                raise DataError(f"unknown column role '{role}'")
        for axis in ("x", "y", "z"):
            if self.columns.count(axis) != 1:
                raise DataError(f"schema needs exactly one '{axis}' column")
        if self.columns.count("label") > 1:
            raise DataError("schema allows at most one 'label' column")
        if self.class_names and len(self.class_names) != self.n_classes:
            raise DataError(
                f"{len(self.class_names)} class names for {self.n_classes} classes")

    @property
    def has_labels(self) -> bool:
        return "label" in self.columns

    @property
    def n_features(self) -> int:
        return self.columns.count("feature")


@dataclass
class PointTable:
    """Raw parsed points: coords in source units (meters), feature columns,
    optional labels."""

    coords: np.ndarray                 # [N, 3]
    feats: np.ndarray                  # [N, M], M may be 0
    labels: np.ndarray | None = None   # [N] int


@dataclass
class Patch:
    origin: tuple[float, float]
    extent: tuple[float, float]
    points: PointTable                 # raw coordinates retained
    source_id: str
    rows: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))


def load_ascii_points(path, schema: ColumnSchema) -> PointTable:
    """Parse a whitespace-separated point file. Any malformed row raises a
    DataError naming the line (and column where known)."""
    xi = schema.columns.index("x")
    yi = schema.columns.index("y")
    zi = schema.columns.index("z")
    fi = [i for i, r in enumerate(schema.columns) if r == "feature"]
    li = schema.columns.index("label") if schema.has_labels else None
    ncol = len(schema.columns)

    coords, feats, labels = [], [], []
    with open(path, "r") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != ncol:
                raise DataError(
                    f"{path}: line {lineno}: expected {ncol} columns, got {len(parts)}")
            try:
                row = [float(tok) for tok in parts]
            except ValueError:
                bad = next(i for i, tok in enumerate(parts)
                           if not _is_number(tok))
                raise DataError(
                    f"{path}: line {lineno}, column {bad + 1}: "
                    f"unparseable value '{parts[bad]}'") from None
            coords.append((row[xi], row[yi], row[zi]))
            feats.append([row[i] for i in fi])
            if li is not None:
                lbl = int(row[li])
                if not 0 <= lbl < schema.n_classes:
                    raise DataError(
                        f"{path}: line {lineno}: label {lbl} out of range "
                        f"[0, {schema.n_classes})")
                labels.append(lbl)
    if not coords:
        raise DataError(f"{path}: no points")
    return PointTable(
        np.asarray(coords, dtype=np.float64),
        np.asarray(feats, dtype=np.float64).reshape(len(coords), len(fi)),
        np.asarray(labels, dtype=np.int64) if li is not None else None)


def _is_number(tok: str) -> bool:
    try:
        float(tok)
        return True
    except ValueError:
        return False


def write_ascii_points(path, table: PointTable, schema: ColumnSchema) -> None:
    """Emit rows in schema order; %.17g keeps float64 round-trips exact.
    'ignore' columns are written as 0."""
    fi = iter(range(table.feats.shape[1]))
    feature_slot = {}
    for i, role in enumerate(schema.columns):
        if role == "feature":
            feature_slot[i] = next(fi)
    with open(path, "w") as fh:
        for n in range(table.coords.shape[0]):
            parts = []
            for i, role in enumerate(schema.columns):
                if role == "x":
                    parts.append(f"{table.coords[n, 0]:.17g}")
                elif role == "y":
                    parts.append(f"{table.coords[n, 1]:.17g}")
                elif role == "z":
                    parts.append(f"{table.coords[n, 2]:.17g}")
                elif role == "feature":
                    parts.append(f"{table.feats[n, feature_slot[i]]:.17g}")
                elif role == "label":
                    parts.append(str(int(table.labels[n])))
                else:
                    parts.append("0")
            fh.write(" ".join(parts) + "\n")


def tile_patches(table: PointTable, patch_size_m: float,
                 source_id: str = "scene") -> list[Patch]:
    """Partition into axis-aligned square tiles anchored at the global min
    corner. Tiles are upper-inclusive, so points on a shared edge belong
    to the lower-index tile; the min corner belongs to tile 0. Empty tiles
    are dropped."""
    xy = table.coords[:, :2]
    x0, y0 = xy.min(axis=0)
    ix = np.maximum(np.ceil((xy[:, 0] - x0) / patch_size_m).astype(np.int64) - 1, 0)
    iy = np.maximum(np.ceil((xy[:, 1] - y0) / patch_size_m).astype(np.int64) - 1, 0)
    patches = []
    for key in sorted(set(zip(ix.tolist(), iy.tolist()))):
        mask = (ix == key[0]) & (iy == key[1])
        rows = np.nonzero(mask)[0]
        sub = PointTable(
            table.coords[rows],
            table.feats[rows],
            table.labels[rows] if table.labels is not None else None)
        patches.append(Patch(
            origin=(x0 + key[0] * patch_size_m, y0 + key[1] * patch_size_m),
            extent=(patch_size_m, patch_size_m),
            points=sub,
            source_id=f"{source_id}:{key[0]}_{key[1]}",
            rows=rows))
    return patches


def normalize_patch(patch: Patch) -> PointSet:
    """Per-axis normalization to [0,1]: xy by the tile geometry (origin and
    extent, not the point bounding box), z by the patch's own range with a
    degenerate range mapping to 0.5. Feature columns are standardized per
    patch (zero mean, unit variance; constant columns become zero). A
    featureless table gets a constant-1 column so linear layers have
    input."""
    pts = patch.points
    coords = np.empty_like(pts.coords)
    coords[:, 0] = (pts.coords[:, 0] - patch.origin[0]) / patch.extent[0]
    coords[:, 1] = (pts.coords[:, 1] - patch.origin[1]) / patch.extent[1]
    z = pts.coords[:, 2]
    z_min, z_max = z.min(), z.max()
    if z_max > z_min:
        coords[:, 2] = (z - z_min) / (z_max - z_min)
    else:
        coords[:, 2] = 0.5
    if pts.feats.shape[1] == 0:
        feats = np.ones((pts.coords.shape[0], 1))
    else:
        mu = pts.feats.mean(axis=0)
        sd = pts.feats.std(axis=0)
        feats = (pts.feats - mu) / np.where(sd > 0.0, sd, 1.0)
        feats[:, sd == 0.0] = 0.0
    return PointSet(coords, Tensor(feats), pts.labels)


def denormalize_coords(norm_coords: np.ndarray, patch: Patch) -> np.ndarray:
    """Inverse of normalize_patch on coordinates."""
    z = patch.points.coords[:, 2]
    z_min, z_max = z.min(), z.max()
    out = np.empty_like(norm_coords)
    out[:, 0] = norm_coords[:, 0] * patch.extent[0] + patch.origin[0]
    out[:, 1] = norm_coords[:, 1] * patch.extent[1] + patch.origin[1]
    if z_max > z_min:
        out[:, 2] = norm_coords[:, 2] * (z_max - z_min) + z_min
    else:
        out[:, 2] = z_min
    return out


def sample_fixed(ps: PointSet, n: int = 4096, seed=0) -> PointSet:
    """Uniform sample without replacement down to n points, or keep all
    points and top up with replacement when there are fewer than n."""
    rng = np.random.default_rng(seed)
    if ps.n >= n:
        idx = rng.choice(ps.n, size=n, replace=False)
    else:
        extra = rng.integers(0, ps.n, size=n - ps.n)
        idx = np.concatenate([np.arange(ps.n), extra])
    return ps.subset(idx)


# ---------------------------------------------------------------------------
# synthetic scenes
# ---------------------------------------------------------------------------

SYNTH_TILE_M = 30.0
SYNTH_PROPORTIONS = (0.50, 0.20, 0.14, 0.08, 0.08)
SYNTH_CLASS_NAMES = ("ground", "roof", "tree", "car", "powerline")
# car and powerline share an intensity mean on purpose: only altitude
# separates them, which is what the sphere-sampling layer is for
_INTENSITY_MEANS = (0.0, 1.0, 2.0, 3.0, 3.0)
_INTENSITY_SIGMA = 0.05


def _class_counts(n_points: int, n_classes: int) -> np.ndarray:
    props = np.asarray(SYNTH_PROPORTIONS[:n_classes])
    props = props / props.sum()
    counts = np.floor(props * n_points).astype(np.int64)
    counts[0] += n_points - counts.sum()
    return counts


def synth_scene(seed: int, n_points: int, n_classes: int = 5) -> PointSet:
    """Deterministic labeled scene in a 30 m tile with altitude-separable
    classes: ground plane, box roofs at 5-12 m, tree canopies at 3-15 m,
    car boxes at 0.5-1.5 m, powerline strands at 10.4-13.6 m. The single
    intensity feature correlates with class."""
    if not 2 <= n_classes <= 5:
        raise ContractError(f"synth_scene supports 2..5 classes, got {n_classes}")
    rng = np.random.default_rng(seed)
    counts = _class_counts(n_points, n_classes)
    parts, labels = [], []

    # class 0: ground with low-amplitude relief
    n = int(counts[0])
    g = np.empty((n, 3))
    g[:, 0] = rng.uniform(0, SYNTH_TILE_M, n)
    g[:, 1] = rng.uniform(0, SYNTH_TILE_M, n)
    g[:, 2] = np.clip(rng.normal(0.15, 0.08, n), 0.0, 0.35)
    parts.append(g)
    labels.append(np.zeros(n, dtype=np.int64))

    if n_classes > 1:  # class 1: rectangular roofs
        n = int(counts[1])
        n_roofs = 4
        centers = rng.uniform(5, 25, (n_roofs, 2))
        half = rng.uniform(2.0, 4.5, (n_roofs, 2))
        height = rng.uniform(5.0, 12.0, n_roofs)
        pick = rng.integers(0, n_roofs, n)
        r = np.empty((n, 3))
        r[:, 0] = centers[pick, 0] + rng.uniform(-1, 1, n) * half[pick, 0]
        r[:, 1] = centers[pick, 1] + rng.uniform(-1, 1, n) * half[pick, 1]
        r[:, 2] = height[pick] + rng.normal(0, 0.05, n)
        np.clip(r[:, :2], 0, SYNTH_TILE_M, out=r[:, :2])
        parts.append(r)
        labels.append(np.ones(n, dtype=np.int64))

    if n_classes > 2:  # class 2: gaussian tree canopies
        n = int(counts[2])
        n_trees = 8
        centers = np.column_stack([
            rng.uniform(2, 28, n_trees), rng.uniform(2, 28, n_trees),
            rng.uniform(5.0, 12.0, n_trees)])
        pick = rng.integers(0, n_trees, n)
        t = centers[pick] + rng.normal(0, 1.0, (n, 3)) * np.array([1.2, 1.2, 1.8])
        np.clip(t[:, :2], 0, SYNTH_TILE_M, out=t[:, :2])
        t[:, 2] = np.clip(t[:, 2], 3.0, 15.0)
        parts.append(t)
        labels.append(np.full(n, 2, dtype=np.int64))

    if n_classes > 3:  # class 3: car boxes near the ground
        n = int(counts[3])
        n_cars = 6
        centers = rng.uniform(2, 28, (n_cars, 2))
        pick = rng.integers(0, n_cars, n)
        c = np.empty((n, 3))
        c[:, 0] = centers[pick, 0] + rng.uniform(-0.9, 0.9, n)
        c[:, 1] = centers[pick, 1] + rng.uniform(-1.8, 1.8, n)
        c[:, 2] = rng.uniform(0.5, 1.5, n)
        np.clip(c[:, :2], 0, SYNTH_TILE_M, out=c[:, :2])
        parts.append(c)
        labels.append(np.full(n, 3, dtype=np.int64))

    if n_classes > 4:  # class 4: catenary powerline strands, strictly above cars
        n = int(counts[4])
        n_lines = 2
        ys = rng.uniform(5, 25, n_lines)
        pick = rng.integers(0, n_lines, n)
        x = rng.uniform(0, SYNTH_TILE_M, n)
        sag = (2.0 * x / SYNTH_TILE_M - 1.0) ** 2
        p = np.empty((n, 3))
        p[:, 0] = x
        p[:, 1] = ys[pick] + rng.normal(0, 0.1, n)
        p[:, 2] = 10.5 + 3.0 * sag + rng.normal(0, 0.03, n)
        parts.append(p)
        labels.append(np.full(n, 4, dtype=np.int64))

    coords = np.concatenate(parts, axis=0)
    lbl = np.concatenate(labels)
    intensity = (np.asarray(_INTENSITY_MEANS)[lbl]
                 + rng.normal(0, _INTENSITY_SIGMA, lbl.shape[0]))
    return PointSet(coords, Tensor(intensity[:, None]), lbl)


def pointset_to_table(ps: PointSet) -> PointTable:
    return PointTable(ps.coords.copy(), ps.feats.data.copy(),
                      None if ps.labels is None else ps.labels.copy())


def label_pyramid(labels: np.ndarray, index_chain: list[np.ndarray]
                  ) -> list[np.ndarray]:
    """Labels at every sampling scale: the retained point keeps its own
    label."""
    n = labels.shape[0]
    out = []
    for idx in index_chain:
        idx = np.asarray(idx)
        if idx.size and (idx.min() < 0 or idx.max() >= n):
            raise ContractError(f"pyramid index out of range [0, {n})")
        out.append(labels[idx])
    return out


# ---------------------------------------------------------------------------
# patch cache: "TDPC", version u32, then per-patch records of
# source_id_len u32 | source_id | origin x,y f64 | extent dx,dy f64 |
# n_points u64 | n_features u64 | has_labels u64 | coords f64 | feats f64 |
# labels u32 -- all little-endian
# ---------------------------------------------------------------------------

_CACHE_MAGIC = b"TDPC"
_CACHE_VERSION = 1


def write_patch_cache(path, patches: list[Patch]) -> None:
    with open(path, "wb") as fh:
        fh.write(_CACHE_MAGIC)
        fh.write(struct.pack("<I", _CACHE_VERSION))
        for patch in patches:
            sid = patch.source_id.encode("utf-8")
            pts = patch.points
            has_labels = pts.labels is not None
            fh.write(struct.pack("<I", len(sid)))
            fh.write(sid)
            fh.write(struct.pack("<4d", patch.origin[0], patch.origin[1],
                                 patch.extent[0], patch.extent[1]))
            fh.write(struct.pack("<3Q", pts.coords.shape[0],
                                 pts.feats.shape[1], int(has_labels)))
            fh.write(np.ascontiguousarray(pts.coords, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(pts.feats, dtype="<f8").tobytes())
            if has_labels:
                fh.write(np.ascontiguousarray(pts.labels, dtype="<u4").tobytes())


def read_patch_cache(path) -> list[Patch]:
    patches = []
    with open(path, "rb") as fh:
        if fh.read(4) != _CACHE_MAGIC:
            raise DataError(f"{path}: not a TDPC patch cache")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != _CACHE_VERSION:
            raise DataError(f"{path}: unsupported cache version {version}")
        while True:
            head = fh.read(4)
            if not head:
                break
            (slen,) = struct.unpack("<I", head)
            sid = fh.read(slen).decode("utf-8")
            x0, y0, dx, dy = struct.unpack("<4d", fh.read(32))
            n, m, has_labels = struct.unpack("<3Q", fh.read(24))
            coords = np.frombuffer(fh.read(24 * n), dtype="<f8").reshape(n, 3)
            feats = np.frombuffer(fh.read(8 * n * m), dtype="<f8").reshape(n, m)
            labels = None
            if has_labels:
                labels = np.frombuffer(fh.read(4 * n), dtype="<u4").astype(np.int64)
            patches.append(Patch(
                origin=(x0, y0), extent=(dx, dy),
                points=PointTable(coords.astype(np.float64),
                                  feats.astype(np.float64), labels),
                source_id=sid))
    return patches

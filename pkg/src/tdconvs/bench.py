"""Operator throughput benchmark.

Times the hot kernels (cylinder/sphere rasterization, grid sampling, KNN,
FPS) across sizes, in every available flavour (numba and numpy) plus the
O(N*cells) brute-force rasterization baseline. Emits CSV rows
``op,n_points,grid,median_us,p95_us`` and runs two self-checks: the
bucketed rasterizer must match brute force exactly, and must beat it
beyond 10k points.
"""

from __future__ import annotations

import time

import numpy as np

from . import kernels
from .errors import VerificationError

CSV_HEADER = "op,n_points,grid,median_us,p95_us"

RASTER_SIZES = (1000, 5000, 20000)
KNN_SIZES = (500, 1000, 2000)
FPS_SIZES = (1000, 4000)
SAMPLE_SIZES = (1000, 5000)
SPEED_CHECK_N = 20000


def _time_us(fn, repeats: int) -> tuple[float, float]:
    fn()  # warm up (JIT compilation, caches)
    samples = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        samples.append((time.perf_counter() - t0) * 1e6)
    arr = np.sort(np.asarray(samples))
    return float(np.median(arr)), float(arr[min(len(arr) - 1, int(0.95 * len(arr)))])


def run_bench(repeats: int = 5, seed: int = 0) -> list[tuple[str, int, str, float, float]]:
    rng = np.random.default_rng(seed)
    rows: list[tuple[str, int, str, float, float]] = []
    flavours = list(kernels.IMPLEMENTATIONS.items())

    for n in RASTER_SIZES:
        xy = rng.random((n, 2))
        xyz = rng.random((n, 3))
        feats = rng.standard_normal((n, 8))
        from .geom import half_diagonal_2d, half_diagonal_3d
        r2d = half_diagonal_2d(40, 40)
        r3d = half_diagonal_3d(40, 40, 5)
        for name, impl in flavours:
            def cyl(impl=impl):
                ptr, mem = impl["members_2d"](xy, 40, 40, r2d)
                impl["scatter_mean_fwd"](ptr, mem, feats)
            rows.append(("cylindricize:" + name, n, "40x40", *_time_us(cyl, repeats)))

            def sph(impl=impl):
                ptr, mem = impl["members_3d"](xyz, 40, 40, 5, r3d)
                impl["scatter_mean_fwd"](ptr, mem, feats)
            rows.append(("spheroidize:" + name, n, "40x40x5", *_time_us(sph, repeats)))

        def brute():
            ptr, mem = kernels.brute_members_2d(xy, 40, 40, r2d)
            kernels.scatter_mean_fwd(ptr, mem, feats)
        rows.append(("cylindricize:brute", n, "40x40", *_time_us(brute, repeats)))

    for n in SAMPLE_SIZES:
        values = rng.standard_normal((40, 40, 8))
        u = rng.random(4 * n) * 40 - 0.5
        v = rng.random(4 * n) * 40 - 0.5
        vol = rng.standard_normal((40, 40, 5, 8))
        t = rng.random(4 * n) * 5 - 0.5
        for name, impl in flavours:
            rows.append(("grid_sample_2d:" + name, n, "40x40",
                         *_time_us(lambda impl=impl: impl["bilinear_fwd"](values, u, v), repeats)))
            rows.append(("grid_sample_3d:" + name, n, "40x40x5",
                         *_time_us(lambda impl=impl: impl["trilinear_fwd"](vol, u, v, t), repeats)))

    for n in KNN_SIZES:
        pts = rng.random((n, 3))
        for name, impl in flavours:
            rows.append(("knn:" + name, n, "-",
                         *_time_us(lambda impl=impl: impl["knn_query"](pts, pts, 16), repeats)))

    for n in FPS_SIZES:
        pts = rng.random((n, 3))
        for name, impl in flavours:
            rows.append(("fps:" + name, n, "-",
                         *_time_us(lambda impl=impl, pts=pts: impl["fps"](pts, 0, pts.shape[0] // 4), repeats)))

    return rows


def self_check(seed: int = 0) -> None:
    """Bucketed and brute-force rasterization must agree exactly; the
    bucketed path must be faster beyond 10k points."""
    from .geom import half_diagonal_2d
    rng = np.random.default_rng(seed)
    xy = rng.random((SPEED_CHECK_N, 2))
    feats = rng.standard_normal((SPEED_CHECK_N, 8))
    radius = half_diagonal_2d(40, 40)

    ptr_a, mem_a = kernels.members_2d(xy, 40, 40, radius)
    ptr_b, mem_b = kernels.brute_members_2d(xy, 40, 40, radius)
    if not (np.array_equal(ptr_a, ptr_b) and np.array_equal(mem_a, mem_b)):
        raise VerificationError("bucketed and brute-force memberships differ")
    va, ca = kernels.scatter_mean_fwd(ptr_a, mem_a, feats)
    vb, cb = kernels.scatter_mean_fwd(ptr_b, mem_b, feats)
    if not (np.array_equal(va, vb) and np.array_equal(ca, cb)):
        raise VerificationError("bucketed and brute-force means differ")

    fast, _ = _time_us(lambda: kernels.members_2d(xy, 40, 40, radius), 5)
    slow, _ = _time_us(lambda: kernels.brute_members_2d(xy, 40, 40, radius), 5)
    if fast >= slow:
        raise VerificationError(
            f"bucketed rasterization ({fast:.0f}us) is not faster than "
            f"brute force ({slow:.0f}us) at {SPEED_CHECK_N} points")


def write_csv(path, rows) -> None:
    with open(path, "w") as fh:
        fh.write(CSV_HEADER + "\n")
        for op, n, grid, med, p95 in rows:
            fh.write(f"{op},{n},{grid},{med:.1f},{p95:.1f}\n")

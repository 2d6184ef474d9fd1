"""Hot numeric kernels, in two interchangeable flavours.

Every kernel exists twice: a numba ``@njit`` version and a pure-numpy
version. ``TDCONVS_PURE_NUMPY=1`` (or numba being unavailable) selects the
numpy path for the whole process; ``tdconvs bench`` times both. Cell means
use correctly-rounded summation (the math.fsum algorithm), which makes
rasterization independent of the input point order bit for bit and lets
both flavours agree exactly with the brute-force oracles in the tests.

All kernels take/return plain float64/int64 arrays and know nothing about
the autodiff graph; geom.py wraps them into graph nodes.
"""

from __future__ import annotations

import math
import os

import numpy as np

PURE_NUMPY_ENV = "TDCONVS_PURE_NUMPY"

_pure_requested = os.environ.get(PURE_NUMPY_ENV, "0") not in ("", "0", "false")
try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False

ACTIVE = "numba" if (HAVE_NUMBA and not _pure_requested) else "numpy"


# ---------------------------------------------------------------------------
# numpy flavour
# ---------------------------------------------------------------------------

def _np_candidate_pairs_1d(c, n, radius):
    """Index range of grid rows whose center could be within radius of c.

    Intentionally one cell wider than necessary; the exact distance test
    decides membership.
    """
    lo = np.floor((c - radius) * n - 0.5).astype(np.int64)
    hi = np.ceil((c + radius) * n - 0.5).astype(np.int64)
    return np.clip(lo, 0, n - 1), np.clip(hi, 0, n - 1)


def _np_members_2d(xy, h, w, radius):
    n_pts = xy.shape[0]
    i_lo, i_hi = _np_candidate_pairs_1d(xy[:, 0], h, radius)
    j_lo, j_hi = _np_candidate_pairs_1d(xy[:, 1], w, radius)
    max_i = int((i_hi - i_lo).max()) + 1 if n_pts else 1
    max_j = int((j_hi - j_lo).max()) + 1 if n_pts else 1

    ii = i_lo[:, None] + np.arange(max_i)[None, :]              # [N, max_i]
    jj = j_lo[:, None] + np.arange(max_j)[None, :]              # [N, max_j]
    valid = ((ii <= i_hi[:, None])[:, :, None]
             & (jj <= j_hi[:, None])[:, None, :])               # [N, max_i, max_j]
    cx = (ii + 0.5) / h
    cy = (jj + 0.5) / w
    dx = xy[:, 0][:, None] - cx                                  # [N, max_i]
    dy = xy[:, 1][:, None] - cy                                  # [N, max_j]
    d2 = dx[:, :, None] ** 2 + dy[:, None, :] ** 2
    hit = valid & (d2 < radius * radius)

    pt, ci, cj = np.nonzero(hit)
    cells = ii[pt, ci] * w + jj[pt, cj]
    order = np.lexsort((pt, cells))
    cells = cells[order]
    members = pt[order].astype(np.int64)
    counts = np.bincount(cells, minlength=h * w)
    ptr = np.zeros(h * w + 1, dtype=np.int64)
    np.cumsum(counts, out=ptr[1:])
    return ptr, members


def _np_members_3d(xyz, h, w, z, radius):
    n_pts = xyz.shape[0]
    i_lo, i_hi = _np_candidate_pairs_1d(xyz[:, 0], h, radius)
    j_lo, j_hi = _np_candidate_pairs_1d(xyz[:, 1], w, radius)
    k_lo, k_hi = _np_candidate_pairs_1d(xyz[:, 2], z, radius)
    max_i = int((i_hi - i_lo).max()) + 1 if n_pts else 1
    max_j = int((j_hi - j_lo).max()) + 1 if n_pts else 1
    max_k = int((k_hi - k_lo).max()) + 1 if n_pts else 1

    ii = i_lo[:, None] + np.arange(max_i)[None, :]
    jj = j_lo[:, None] + np.arange(max_j)[None, :]
    kk = k_lo[:, None] + np.arange(max_k)[None, :]
    valid = ((ii <= i_hi[:, None])[:, :, None, None]
             & (jj <= j_hi[:, None])[:, None, :, None]
             & (kk <= k_hi[:, None])[:, None, None, :])
    dx = xyz[:, 0][:, None] - (ii + 0.5) / h
    dy = xyz[:, 1][:, None] - (jj + 0.5) / w
    dz = xyz[:, 2][:, None] - (kk + 0.5) / z
    d2 = (dx[:, :, None, None] ** 2 + dy[:, None, :, None] ** 2
          + dz[:, None, None, :] ** 2)
    hit = valid & (d2 < radius * radius)

    pt, ci, cj, ck = np.nonzero(hit)
    cells = (ii[pt, ci] * w + jj[pt, cj]) * z + kk[pt, ck]
    order = np.lexsort((pt, cells))
    cells = cells[order]
    members = pt[order].astype(np.int64)
    counts = np.bincount(cells, minlength=h * w * z)
    ptr = np.zeros(h * w * z + 1, dtype=np.int64)
    np.cumsum(counts, out=ptr[1:])
    return ptr, members


def _np_scatter_mean_fwd(ptr, members, feats):
    # correctly-rounded per-cell sums (math.fsum) make the cell means
    # independent of the input point order, bit for bit
    n_cells = ptr.shape[0] - 1
    m = feats.shape[1]
    counts = np.diff(ptr)
    values = np.zeros((n_cells, m))
    for c in np.nonzero(counts)[0]:
        rows = feats[members[ptr[c]:ptr[c + 1]]]
        for d in range(m):
            values[c, d] = math.fsum(rows[:, d]) / counts[c]
    return values, counts.astype(np.int64)


def _np_scatter_mean_bwd(ptr, members, counts, grad_values, n_points):
    grad = np.zeros((n_points, grad_values.shape[1]))
    n_cells = ptr.shape[0] - 1
    cell_of = np.repeat(np.arange(n_cells), np.diff(ptr))
    scale = np.zeros(n_cells)
    nz = counts > 0
    scale[nz] = 1.0 / counts[nz]
    np.add.at(grad, members, grad_values[cell_of] * scale[cell_of][:, None])
    return grad


def _np_brute_members_2d(xy, h, w, radius):
    """O(N * cells) full scan; benchmark baseline for the bucketed variant."""
    ii, jj = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    centers = np.stack([(ii.ravel() + 0.5) / h, (jj.ravel() + 0.5) / w], axis=1)
    d2 = ((xy[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
    hit = d2 < radius * radius
    pt, cells = np.nonzero(hit)
    order = np.lexsort((pt, cells))
    members = pt[order].astype(np.int64)
    counts = np.bincount(cells[order], minlength=h * w)
    ptr = np.zeros(h * w + 1, dtype=np.int64)
    np.cumsum(counts, out=ptr[1:])
    return ptr, members


def _np_knn_query(query, ref, k):
    q = query.shape[0]
    out = np.empty((q, k), dtype=np.int64)
    col = np.arange(ref.shape[0])
    block = max(1, min(q, 8_000_000 // max(ref.shape[0], 1)))
    for s in range(0, q, block):
        e = min(s + block, q)
        diff = query[s:e, None, :] - ref[None, :, :]
        d2 = diff[:, :, 0] ** 2 + diff[:, :, 1] ** 2 + diff[:, :, 2] ** 2
        keys_idx = np.broadcast_to(col, d2.shape)
        order = np.lexsort((keys_idx, d2), axis=1)
        out[s:e] = order[:, :k]
    return out


def _np_fps(coords, start, n):
    sel = np.empty(n, dtype=np.int64)
    sel[0] = start
    diff = coords - coords[start]
    mind = diff[:, 0] ** 2 + diff[:, 1] ** 2 + diff[:, 2] ** 2
    for t in range(1, n):
        nxt = int(np.argmax(mind))
        sel[t] = nxt
        diff = coords - coords[nxt]
        d2 = diff[:, 0] ** 2 + diff[:, 1] ** 2 + diff[:, 2] ** 2
        np.minimum(mind, d2, out=mind)
    return sel


def _np_bilinear_prep(u, v, h, w):
    uc = np.clip(u, 0.0, h - 1.0)
    vc = np.clip(v, 0.0, w - 1.0)
    i0 = np.minimum(np.floor(uc), h - 1).astype(np.int64)
    j0 = np.minimum(np.floor(vc), w - 1).astype(np.int64)
    i1 = np.minimum(i0 + 1, h - 1)
    j1 = np.minimum(j0 + 1, w - 1)
    return uc - i0, vc - j0, i0, i1, j0, j1


def _np_bilinear_fwd(values, u, v):
    h, w, _ = values.shape
    fu, fv, i0, i1, j0, j1 = _np_bilinear_prep(u, v, h, w)
    w00 = (1.0 - fu) * (1.0 - fv)
    w01 = (1.0 - fu) * fv
    w10 = fu * (1.0 - fv)
    w11 = fu * fv
    return (w00[:, None] * values[i0, j0] + w01[:, None] * values[i0, j1]
            + w10[:, None] * values[i1, j0] + w11[:, None] * values[i1, j1])


def _np_bilinear_bwd_values(shape, u, v, grad_out):
    h, w, m = shape
    fu, fv, i0, i1, j0, j1 = _np_bilinear_prep(u, v, h, w)
    gv = np.zeros((h, w, m))
    np.add.at(gv, (i0, j0), ((1.0 - fu) * (1.0 - fv))[:, None] * grad_out)
    np.add.at(gv, (i0, j1), ((1.0 - fu) * fv)[:, None] * grad_out)
    np.add.at(gv, (i1, j0), (fu * (1.0 - fv))[:, None] * grad_out)
    np.add.at(gv, (i1, j1), (fu * fv)[:, None] * grad_out)
    return gv


def _np_bilinear_bwd_coords(values, u, v, grad_out):
    h, w, _ = values.shape
    fu, fv, i0, i1, j0, j1 = _np_bilinear_prep(u, v, h, w)
    du_val = ((values[i1, j0] - values[i0, j0]) * (1.0 - fv)[:, None]
              + (values[i1, j1] - values[i0, j1]) * fv[:, None])
    dv_val = ((values[i0, j1] - values[i0, j0]) * (1.0 - fu)[:, None]
              + (values[i1, j1] - values[i1, j0]) * fu[:, None])
    gu = (grad_out * du_val).sum(axis=1)
    gv = (grad_out * dv_val).sum(axis=1)
    gu[(u < 0.0) | (u > h - 1.0)] = 0.0
    gv[(v < 0.0) | (v > w - 1.0)] = 0.0
    return gu, gv


def _np_trilinear_prep(u, v, t, h, w, z):
    uc = np.clip(u, 0.0, h - 1.0)
    vc = np.clip(v, 0.0, w - 1.0)
    tc = np.clip(t, 0.0, z - 1.0)
    i0 = np.minimum(np.floor(uc), h - 1).astype(np.int64)
    j0 = np.minimum(np.floor(vc), w - 1).astype(np.int64)
    k0 = np.minimum(np.floor(tc), z - 1).astype(np.int64)
    i1 = np.minimum(i0 + 1, h - 1)
    j1 = np.minimum(j0 + 1, w - 1)
    k1 = np.minimum(k0 + 1, z - 1)
    return uc - i0, vc - j0, tc - k0, i0, i1, j0, j1, k0, k1


def _np_trilinear_fwd(values, u, v, t):
    h, w, z, _ = values.shape
    fu, fv, ft, i0, i1, j0, j1, k0, k1 = _np_trilinear_prep(u, v, t, h, w, z)
    gu, gv, gt = 1.0 - fu, 1.0 - fv, 1.0 - ft
    return ((gu * gv * gt)[:, None] * values[i0, j0, k0]
            + (gu * gv * ft)[:, None] * values[i0, j0, k1]
            + (gu * fv * gt)[:, None] * values[i0, j1, k0]
            + (gu * fv * ft)[:, None] * values[i0, j1, k1]
            + (fu * gv * gt)[:, None] * values[i1, j0, k0]
            + (fu * gv * ft)[:, None] * values[i1, j0, k1]
            + (fu * fv * gt)[:, None] * values[i1, j1, k0]
            + (fu * fv * ft)[:, None] * values[i1, j1, k1])


def _np_trilinear_bwd_values(shape, u, v, t, grad_out):
    h, w, z, m = shape
    fu, fv, ft, i0, i1, j0, j1, k0, k1 = _np_trilinear_prep(u, v, t, h, w, z)
    gu, gv, gt = 1.0 - fu, 1.0 - fv, 1.0 - ft
    out = np.zeros((h, w, z, m))
    np.add.at(out, (i0, j0, k0), (gu * gv * gt)[:, None] * grad_out)
    np.add.at(out, (i0, j0, k1), (gu * gv * ft)[:, None] * grad_out)
    np.add.at(out, (i0, j1, k0), (gu * fv * gt)[:, None] * grad_out)
    np.add.at(out, (i0, j1, k1), (gu * fv * ft)[:, None] * grad_out)
    np.add.at(out, (i1, j0, k0), (fu * gv * gt)[:, None] * grad_out)
    np.add.at(out, (i1, j0, k1), (fu * gv * ft)[:, None] * grad_out)
    np.add.at(out, (i1, j1, k0), (fu * fv * gt)[:, None] * grad_out)
    np.add.at(out, (i1, j1, k1), (fu * fv * ft)[:, None] * grad_out)
    return out


def _np_trilinear_bwd_coords(values, u, v, t, grad_out):
    h, w, z, _ = values.shape
    fu, fv, ft, i0, i1, j0, j1, k0, k1 = _np_trilinear_prep(u, v, t, h, w, z)
    gu, gv, gt = 1.0 - fu, 1.0 - fv, 1.0 - ft
    du_val = ((values[i1, j0, k0] - values[i0, j0, k0]) * (gv * gt)[:, None]
              + (values[i1, j0, k1] - values[i0, j0, k1]) * (gv * ft)[:, None]
              + (values[i1, j1, k0] - values[i0, j1, k0]) * (fv * gt)[:, None]
              + (values[i1, j1, k1] - values[i0, j1, k1]) * (fv * ft)[:, None])
    dv_val = ((values[i0, j1, k0] - values[i0, j0, k0]) * (gu * gt)[:, None]
              + (values[i0, j1, k1] - values[i0, j0, k1]) * (gu * ft)[:, None]
              + (values[i1, j1, k0] - values[i1, j0, k0]) * (fu * gt)[:, None]
              + (values[i1, j1, k1] - values[i1, j0, k1]) * (fu * ft)[:, None])
    dt_val = ((values[i0, j0, k1] - values[i0, j0, k0]) * (gu * gv)[:, None]
              + (values[i0, j1, k1] - values[i0, j1, k0]) * (gu * fv)[:, None]
              + (values[i1, j0, k1] - values[i1, j0, k0]) * (fu * gv)[:, None]
              + (values[i1, j1, k1] - values[i1, j1, k0]) * (fu * fv)[:, None])
    g_u = (grad_out * du_val).sum(axis=1)
    g_v = (grad_out * dv_val).sum(axis=1)
    g_t = (grad_out * dt_val).sum(axis=1)
    g_u[(u < 0.0) | (u > h - 1.0)] = 0.0
    g_v[(v < 0.0) | (v > w - 1.0)] = 0.0
    g_t[(t < 0.0) | (t > z - 1.0)] = 0.0
    return g_u, g_v, g_t


# ---------------------------------------------------------------------------
# numba flavour
# ---------------------------------------------------------------------------

if HAVE_NUMBA:

    @njit(cache=True)
    def _nb_members_2d(xy, h, w, radius):
        n_pts = xy.shape[0]
        r2 = radius * radius
        counts = np.zeros(h * w, dtype=np.int64)
        for p in range(n_pts):
            x = xy[p, 0]
            y = xy[p, 1]
            i_lo = max(np.int64(np.floor((x - radius) * h - 0.5)), 0)
            i_hi = min(np.int64(np.ceil((x + radius) * h - 0.5)), h - 1)
            j_lo = max(np.int64(np.floor((y - radius) * w - 0.5)), 0)
            j_hi = min(np.int64(np.ceil((y + radius) * w - 0.5)), w - 1)
            for i in range(i_lo, i_hi + 1):
                dx = x - (i + 0.5) / h
                for j in range(j_lo, j_hi + 1):
                    dy = y - (j + 0.5) / w
                    if dx * dx + dy * dy < r2:
                        counts[i * w + j] += 1
        ptr = np.zeros(h * w + 1, dtype=np.int64)
        for c in range(h * w):
            ptr[c + 1] = ptr[c] + counts[c]
        members = np.empty(ptr[h * w], dtype=np.int64)
        cursor = ptr[:-1].copy()
        for p in range(n_pts):
            x = xy[p, 0]
            y = xy[p, 1]
            i_lo = max(np.int64(np.floor((x - radius) * h - 0.5)), 0)
            i_hi = min(np.int64(np.ceil((x + radius) * h - 0.5)), h - 1)
            j_lo = max(np.int64(np.floor((y - radius) * w - 0.5)), 0)
            j_hi = min(np.int64(np.ceil((y + radius) * w - 0.5)), w - 1)
            for i in range(i_lo, i_hi + 1):
                dx = x - (i + 0.5) / h
                for j in range(j_lo, j_hi + 1):
                    dy = y - (j + 0.5) / w
                    if dx * dx + dy * dy < r2:
                        c = i * w + j
                        members[cursor[c]] = p
                        cursor[c] += 1
        return ptr, members

    @njit(cache=True)
    def _nb_members_3d(xyz, h, w, z, radius):
        n_pts = xyz.shape[0]
        r2 = radius * radius
        n_cells = h * w * z
        counts = np.zeros(n_cells, dtype=np.int64)
        for p in range(n_pts):
            x = xyz[p, 0]
            y = xyz[p, 1]
            zz = xyz[p, 2]
            i_lo = max(np.int64(np.floor((x - radius) * h - 0.5)), 0)
            i_hi = min(np.int64(np.ceil((x + radius) * h - 0.5)), h - 1)
            j_lo = max(np.int64(np.floor((y - radius) * w - 0.5)), 0)
            j_hi = min(np.int64(np.ceil((y + radius) * w - 0.5)), w - 1)
            k_lo = max(np.int64(np.floor((zz - radius) * z - 0.5)), 0)
            k_hi = min(np.int64(np.ceil((zz + radius) * z - 0.5)), z - 1)
            for i in range(i_lo, i_hi + 1):
                dx = x - (i + 0.5) / h
                for j in range(j_lo, j_hi + 1):
                    dy = y - (j + 0.5) / w
                    for k in range(k_lo, k_hi + 1):
                        dz = zz - (k + 0.5) / z
                        if dx * dx + dy * dy + dz * dz < r2:
                            counts[(i * w + j) * z + k] += 1
        ptr = np.zeros(n_cells + 1, dtype=np.int64)
        for c in range(n_cells):
            ptr[c + 1] = ptr[c] + counts[c]
        members = np.empty(ptr[n_cells], dtype=np.int64)
        cursor = ptr[:-1].copy()
        for p in range(n_pts):
            x = xyz[p, 0]
            y = xyz[p, 1]
            zz = xyz[p, 2]
            i_lo = max(np.int64(np.floor((x - radius) * h - 0.5)), 0)
            i_hi = min(np.int64(np.ceil((x + radius) * h - 0.5)), h - 1)
            j_lo = max(np.int64(np.floor((y - radius) * w - 0.5)), 0)
            j_hi = min(np.int64(np.ceil((y + radius) * w - 0.5)), w - 1)
            k_lo = max(np.int64(np.floor((zz - radius) * z - 0.5)), 0)
            k_hi = min(np.int64(np.ceil((zz + radius) * z - 0.5)), z - 1)
            for i in range(i_lo, i_hi + 1):
                dx = x - (i + 0.5) / h
                for j in range(j_lo, j_hi + 1):
                    dy = y - (j + 0.5) / w
                    for k in range(k_lo, k_hi + 1):
                        dz = zz - (k + 0.5) / z
                        if dx * dx + dy * dy + dz * dz < r2:
                            c = (i * w + j) * z + k
                            members[cursor[c]] = p
                            cursor[c] += 1
        return ptr, members

    @njit(cache=True)
    def _nb_scatter_mean_fwd(ptr, members, feats):
        # port of CPython's math.fsum: cell sums are correctly rounded and
        # therefore independent of the input point order, matching the
        # numpy flavour bit for bit
        n_cells = ptr.shape[0] - 1
        m = feats.shape[1]
        values = np.zeros((n_cells, m))
        counts = np.empty(n_cells, dtype=np.int64)
        partials = np.empty(64)
        for c in range(n_cells):
            count = ptr[c + 1] - ptr[c]
            counts[c] = count
            if count == 0:
                continue
            for d in range(m):
                n_part = 0
                for s in range(ptr[c], ptr[c + 1]):
                    x = feats[members[s], d]
                    i = 0
                    for j in range(n_part):
                        y = partials[j]
                        if abs(x) < abs(y):
                            t = x
                            x = y
                            y = t
                        hi = x + y
                        yr = hi - x
                        lo = y - yr
                        if lo != 0.0:
                            partials[i] = lo
                            i += 1
                        x = hi
                    n_part = i
                    if x != 0.0:
                        partials[n_part] = x
                        n_part += 1
                total = 0.0
                if n_part > 0:
                    n_part -= 1
                    total = partials[n_part]
                    lo = 0.0
                    while n_part > 0:
                        x = total
                        n_part -= 1
                        y = partials[n_part]
                        total = x + y
                        yr = total - x
                        lo = y - yr
                        if lo != 0.0:
                            break
                    if n_part > 0 and ((lo < 0.0 and partials[n_part - 1] < 0.0)
                                       or (lo > 0.0 and partials[n_part - 1] > 0.0)):
                        y = lo * 2.0
                        x = total + y
                        yr = x - total
                        if y == yr:
                            total = x
                values[c, d] = total / count
        return values, counts

    @njit(cache=True)
    def _nb_scatter_mean_bwd(ptr, members, counts, grad_values, n_points):
        n_cells = ptr.shape[0] - 1
        m = grad_values.shape[1]
        grad = np.zeros((n_points, m))
        for c in range(n_cells):
            if counts[c] == 0:
                continue
            inv = 1.0 / counts[c]
            for s in range(ptr[c], ptr[c + 1]):
                p = members[s]
                for d in range(m):
                    grad[p, d] += grad_values[c, d] * inv
        return grad

    @njit(cache=True)
    def _nb_brute_members_2d(xy, h, w, radius):
        n_pts = xy.shape[0]
        r2 = radius * radius
        counts = np.zeros(h * w, dtype=np.int64)
        for c in range(h * w):
            cx = (c // w + 0.5) / h
            cy = (c % w + 0.5) / w
            for p in range(n_pts):
                dx = xy[p, 0] - cx
                dy = xy[p, 1] - cy
                if dx * dx + dy * dy < r2:
                    counts[c] += 1
        ptr = np.zeros(h * w + 1, dtype=np.int64)
        for c in range(h * w):
            ptr[c + 1] = ptr[c] + counts[c]
        members = np.empty(ptr[h * w], dtype=np.int64)
        pos = 0
        for c in range(h * w):
            cx = (c // w + 0.5) / h
            cy = (c % w + 0.5) / w
            for p in range(n_pts):
                dx = xy[p, 0] - cx
                dy = xy[p, 1] - cy
                if dx * dx + dy * dy < r2:
                    members[pos] = p
                    pos += 1
        return ptr, members

    @njit(cache=True)
    def _nb_knn_query(query, ref, k):
        q = query.shape[0]
        n = ref.shape[0]
        out = np.empty((q, k), dtype=np.int64)
        best_d = np.empty(k)
        best_i = np.empty(k, dtype=np.int64)
        for a in range(q):
            filled = 0
            for b in range(n):
                dx = query[a, 0] - ref[b, 0]
                dy = query[a, 1] - ref[b, 1]
                dz = query[a, 2] - ref[b, 2]
                d2 = dx * dx + dy * dy + dz * dz
                if filled == k and (d2 > best_d[k - 1] or (
                        d2 == best_d[k - 1] and b > best_i[k - 1])):
                    continue
                pos = min(filled, k - 1)
                while pos > 0 and (best_d[pos - 1] > d2 or (
                        best_d[pos - 1] == d2 and best_i[pos - 1] > b)):
                    best_d[pos] = best_d[pos - 1]
                    best_i[pos] = best_i[pos - 1]
                    pos -= 1
                best_d[pos] = d2
                best_i[pos] = b
                if filled < k:
                    filled += 1
            for t in range(k):
                out[a, t] = best_i[t]
        return out

    @njit(cache=True)
    def _nb_fps(coords, start, n):
        n_pts = coords.shape[0]
        sel = np.empty(n, dtype=np.int64)
        sel[0] = start
        mind = np.empty(n_pts)
        for p in range(n_pts):
            dx = coords[p, 0] - coords[start, 0]
            dy = coords[p, 1] - coords[start, 1]
            dz = coords[p, 2] - coords[start, 2]
            mind[p] = dx * dx + dy * dy + dz * dz
        for t in range(1, n):
            nxt = 0
            best = mind[0]
            for p in range(1, n_pts):
                if mind[p] > best:
                    best = mind[p]
                    nxt = p
            sel[t] = nxt
            for p in range(n_pts):
                dx = coords[p, 0] - coords[nxt, 0]
                dy = coords[p, 1] - coords[nxt, 1]
                dz = coords[p, 2] - coords[nxt, 2]
                d2 = dx * dx + dy * dy + dz * dz
                if d2 < mind[p]:
                    mind[p] = d2
        return sel

    @njit(cache=True)
    def _nb_bilinear_fwd(values, u, v):
        h, w, m = values.shape
        q = u.shape[0]
        out = np.empty((q, m))
        for a in range(q):
            uc = min(max(u[a], 0.0), h - 1.0)
            vc = min(max(v[a], 0.0), w - 1.0)
            i0 = min(np.int64(np.floor(uc)), h - 1)
            j0 = min(np.int64(np.floor(vc)), w - 1)
            i1 = min(i0 + 1, h - 1)
            j1 = min(j0 + 1, w - 1)
            fu = uc - i0
            fv = vc - j0
            w00 = (1.0 - fu) * (1.0 - fv)
            w01 = (1.0 - fu) * fv
            w10 = fu * (1.0 - fv)
            w11 = fu * fv
            for d in range(m):
                out[a, d] = (w00 * values[i0, j0, d] + w01 * values[i0, j1, d]
                             + w10 * values[i1, j0, d] + w11 * values[i1, j1, d])
        return out

    @njit(cache=True)
    def _nb_bilinear_bwd_values(h, w, m, u, v, grad_out):
        out = np.zeros((h, w, m))
        q = u.shape[0]
        for a in range(q):
            uc = min(max(u[a], 0.0), h - 1.0)
            vc = min(max(v[a], 0.0), w - 1.0)
            i0 = min(np.int64(np.floor(uc)), h - 1)
            j0 = min(np.int64(np.floor(vc)), w - 1)
            i1 = min(i0 + 1, h - 1)
            j1 = min(j0 + 1, w - 1)
            fu = uc - i0
            fv = vc - j0
            for d in range(m):
                g = grad_out[a, d]
                out[i0, j0, d] += (1.0 - fu) * (1.0 - fv) * g
                out[i0, j1, d] += (1.0 - fu) * fv * g
                out[i1, j0, d] += fu * (1.0 - fv) * g
                out[i1, j1, d] += fu * fv * g
        return out

    @njit(cache=True)
    def _nb_bilinear_bwd_coords(values, u, v, grad_out):
        h, w, m = values.shape
        q = u.shape[0]
        gu = np.zeros(q)
        gv = np.zeros(q)
        for a in range(q):
            uc = min(max(u[a], 0.0), h - 1.0)
            vc = min(max(v[a], 0.0), w - 1.0)
            i0 = min(np.int64(np.floor(uc)), h - 1)
            j0 = min(np.int64(np.floor(vc)), w - 1)
            i1 = min(i0 + 1, h - 1)
            j1 = min(j0 + 1, w - 1)
            fu = uc - i0
            fv = vc - j0
            su = 0.0
            sv = 0.0
            for d in range(m):
                g = grad_out[a, d]
                su += g * ((values[i1, j0, d] - values[i0, j0, d]) * (1.0 - fv)
                           + (values[i1, j1, d] - values[i0, j1, d]) * fv)
                sv += g * ((values[i0, j1, d] - values[i0, j0, d]) * (1.0 - fu)
                           + (values[i1, j1, d] - values[i1, j0, d]) * fu)
            if 0.0 <= u[a] <= h - 1.0:
                gu[a] = su
            if 0.0 <= v[a] <= w - 1.0:
                gv[a] = sv
        return gu, gv

    @njit(cache=True)
    def _nb_trilinear_fwd(values, u, v, t):
        h, w, z, m = values.shape
        q = u.shape[0]
        out = np.empty((q, m))
        for a in range(q):
            uc = min(max(u[a], 0.0), h - 1.0)
            vc = min(max(v[a], 0.0), w - 1.0)
            tc = min(max(t[a], 0.0), z - 1.0)
            i0 = min(np.int64(np.floor(uc)), h - 1)
            j0 = min(np.int64(np.floor(vc)), w - 1)
            k0 = min(np.int64(np.floor(tc)), z - 1)
            i1 = min(i0 + 1, h - 1)
            j1 = min(j0 + 1, w - 1)
            k1 = min(k0 + 1, z - 1)
            fu = uc - i0
            fv = vc - j0
            ft = tc - k0
            gu = 1.0 - fu
            gv = 1.0 - fv
            gt = 1.0 - ft
            for d in range(m):
                out[a, d] = (gu * gv * gt * values[i0, j0, k0, d]
                             + gu * gv * ft * values[i0, j0, k1, d]
                             + gu * fv * gt * values[i0, j1, k0, d]
                             + gu * fv * ft * values[i0, j1, k1, d]
                             + fu * gv * gt * values[i1, j0, k0, d]
                             + fu * gv * ft * values[i1, j0, k1, d]
                             + fu * fv * gt * values[i1, j1, k0, d]
                             + fu * fv * ft * values[i1, j1, k1, d])
        return out

    @njit(cache=True)
    def _nb_trilinear_bwd_values(h, w, z, m, u, v, t, grad_out):
        out = np.zeros((h, w, z, m))
        q = u.shape[0]
        for a in range(q):
            uc = min(max(u[a], 0.0), h - 1.0)
            vc = min(max(v[a], 0.0), w - 1.0)
            tc = min(max(t[a], 0.0), z - 1.0)
            i0 = min(np.int64(np.floor(uc)), h - 1)
            j0 = min(np.int64(np.floor(vc)), w - 1)
            k0 = min(np.int64(np.floor(tc)), z - 1)
            i1 = min(i0 + 1, h - 1)
            j1 = min(j0 + 1, w - 1)
            k1 = min(k0 + 1, z - 1)
            fu = uc - i0
            fv = vc - j0
            ft = tc - k0
            gu = 1.0 - fu
            gv = 1.0 - fv
            gt = 1.0 - ft
            for d in range(m):
                g = grad_out[a, d]
                out[i0, j0, k0, d] += gu * gv * gt * g
                out[i0, j0, k1, d] += gu * gv * ft * g
                out[i0, j1, k0, d] += gu * fv * gt * g
                out[i0, j1, k1, d] += gu * fv * ft * g
                out[i1, j0, k0, d] += fu * gv * gt * g
                out[i1, j0, k1, d] += fu * gv * ft * g
                out[i1, j1, k0, d] += fu * fv * gt * g
                out[i1, j1, k1, d] += fu * fv * ft * g
        return out

    @njit(cache=True)
    def _nb_trilinear_bwd_coords(values, u, v, t, grad_out):
        h, w, z, m = values.shape
        q = u.shape[0]
        g_u = np.zeros(q)
        g_v = np.zeros(q)
        g_t = np.zeros(q)
        for a in range(q):
            uc = min(max(u[a], 0.0), h - 1.0)
            vc = min(max(v[a], 0.0), w - 1.0)
            tc = min(max(t[a], 0.0), z - 1.0)
            i0 = min(np.int64(np.floor(uc)), h - 1)
            j0 = min(np.int64(np.floor(vc)), w - 1)
            k0 = min(np.int64(np.floor(tc)), z - 1)
            i1 = min(i0 + 1, h - 1)
            j1 = min(j0 + 1, w - 1)
            k1 = min(k0 + 1, z - 1)
            fu = uc - i0
            fv = vc - j0
            ft = tc - k0
            gu = 1.0 - fu
            gv = 1.0 - fv
            gt = 1.0 - ft
            su = 0.0
            sv = 0.0
            st = 0.0
            for d in range(m):
                g = grad_out[a, d]
                su += g * ((values[i1, j0, k0, d] - values[i0, j0, k0, d]) * gv * gt
                           + (values[i1, j0, k1, d] - values[i0, j0, k1, d]) * gv * ft
                           + (values[i1, j1, k0, d] - values[i0, j1, k0, d]) * fv * gt
                           + (values[i1, j1, k1, d] - values[i0, j1, k1, d]) * fv * ft)
                sv += g * ((values[i0, j1, k0, d] - values[i0, j0, k0, d]) * gu * gt
                           + (values[i0, j1, k1, d] - values[i0, j0, k1, d]) * gu * ft
                           + (values[i1, j1, k0, d] - values[i1, j0, k0, d]) * fu * gt
                           + (values[i1, j1, k1, d] - values[i1, j0, k1, d]) * fu * ft)
                st += g * ((values[i0, j0, k1, d] - values[i0, j0, k0, d]) * gu * gv
                           + (values[i0, j1, k1, d] - values[i0, j1, k0, d]) * gu * fv
                           + (values[i1, j0, k1, d] - values[i1, j0, k0, d]) * fu * gv
                           + (values[i1, j1, k1, d] - values[i1, j1, k0, d]) * fu * fv)
            if 0.0 <= u[a] <= h - 1.0:
                g_u[a] = su
            if 0.0 <= v[a] <= w - 1.0:
                g_v[a] = sv
            if 0.0 <= t[a] <= z - 1.0:
                g_t[a] = st
        return g_u, g_v, g_t


# ---------------------------------------------------------------------------
# dispatch tables
# ---------------------------------------------------------------------------

NUMPY_IMPL = {
    "members_2d": _np_members_2d,
    "members_3d": _np_members_3d,
    "scatter_mean_fwd": _np_scatter_mean_fwd,
    "scatter_mean_bwd": _np_scatter_mean_bwd,
    "brute_members_2d": _np_brute_members_2d,
    "knn_query": _np_knn_query,
    "fps": _np_fps,
    "bilinear_fwd": _np_bilinear_fwd,
    "bilinear_bwd_values": lambda shape, u, v, g: _np_bilinear_bwd_values(shape, u, v, g),
    "bilinear_bwd_coords": _np_bilinear_bwd_coords,
    "trilinear_fwd": _np_trilinear_fwd,
    "trilinear_bwd_values": lambda shape, u, v, t, g: _np_trilinear_bwd_values(shape, u, v, t, g),
    "trilinear_bwd_coords": _np_trilinear_bwd_coords,
}

if HAVE_NUMBA:
    NUMBA_IMPL = {
        "members_2d": _nb_members_2d,
        "members_3d": _nb_members_3d,
        "scatter_mean_fwd": _nb_scatter_mean_fwd,
        "scatter_mean_bwd": _nb_scatter_mean_bwd,
        "brute_members_2d": _nb_brute_members_2d,
        "knn_query": _nb_knn_query,
        "fps": _nb_fps,
        "bilinear_fwd": _nb_bilinear_fwd,
        "bilinear_bwd_values": lambda shape, u, v, g: _nb_bilinear_bwd_values(
            shape[0], shape[1], shape[2], u, v, g),
        "bilinear_bwd_coords": _nb_bilinear_bwd_coords,
        "trilinear_fwd": _nb_trilinear_fwd,
        "trilinear_bwd_values": lambda shape, u, v, t, g: _nb_trilinear_bwd_values(
            shape[0], shape[1], shape[2], shape[3], u, v, t, g),
        "trilinear_bwd_coords": _nb_trilinear_bwd_coords,
    }
else:
    NUMBA_IMPL = {}

IMPLEMENTATIONS = {"numpy": NUMPY_IMPL}
if HAVE_NUMBA:
    IMPLEMENTATIONS["numba"] = NUMBA_IMPL


def _active(name):
    return IMPLEMENTATIONS[ACTIVE][name]


def members_2d(xy, h, w, radius):
    """CSR membership (cell_ptr, member point indices) of the cylinders."""
    return _active("members_2d")(np.ascontiguousarray(xy), h, w, radius)


def members_3d(xyz, h, w, z, radius):
    return _active("members_3d")(np.ascontiguousarray(xyz), h, w, z, radius)


def scatter_mean_fwd(ptr, members, feats):
    return _active("scatter_mean_fwd")(ptr, members, np.ascontiguousarray(feats))


def scatter_mean_bwd(ptr, members, counts, grad_values, n_points):
    return _active("scatter_mean_bwd")(
        ptr, members, counts, np.ascontiguousarray(grad_values), n_points)


def brute_members_2d(xy, h, w, radius):
    return _active("brute_members_2d")(np.ascontiguousarray(xy), h, w, radius)


def knn_query(query, ref, k):
    return _active("knn_query")(
        np.ascontiguousarray(query), np.ascontiguousarray(ref), k)


def fps(coords, start, n):
    return _active("fps")(np.ascontiguousarray(coords), start, n)


def bilinear_fwd(values, u, v):
    return _active("bilinear_fwd")(np.ascontiguousarray(values), u, v)


def bilinear_bwd_values(shape, u, v, grad_out):
    return _active("bilinear_bwd_values")(shape, u, v, np.ascontiguousarray(grad_out))


def bilinear_bwd_coords(values, u, v, grad_out):
    return _active("bilinear_bwd_coords")(
        np.ascontiguousarray(values), u, v, np.ascontiguousarray(grad_out))


def trilinear_fwd(values, u, v, t):
    return _active("trilinear_fwd")(np.ascontiguousarray(values), u, v, t)


def trilinear_bwd_values(shape, u, v, t, grad_out):
    return _active("trilinear_bwd_values")(shape, u, v, t, np.ascontiguousarray(grad_out))


def trilinear_bwd_coords(values, u, v, t, grad_out):
    return _active("trilinear_bwd_coords")(
        np.ascontiguousarray(values), u, v, t, np.ascontiguousarray(grad_out))

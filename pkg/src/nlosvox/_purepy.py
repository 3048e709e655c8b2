"""Numpy implementations of the hot kernels.

Used when the compiled extension is unavailable or ``NLOSVOX_BACKEND=python``.
Every floating-point expression here is evaluated in the same order as in
``_kernels.pyx`` so both backends produce bit-identical grids (the compiled
module is built without FMA contraction).  ``threads`` is accepted for
signature compatibility and ignored: this backend is sequential.
"""

from __future__ import annotations

import numpy as np

from .errors import IntegerOverflowError

NAME = "python"
UINT32_MAX = np.uint64(0xFFFFFFFF)


def _axis_centers(lo, h, res):
    return [lo[i] + (np.arange(res[i], dtype=np.float64) + 0.5) * h for i in range(3)]


def backproject(lo, h, res, lasers, ts, pixels, tp, intensity, t0, dt, c, gcorr, threads=1):
    """Per-voxel back-projection; returns float64 sums of shape ``res``."""
    cx, cy, cz = _axis_centers(lo, h, res)
    X, Y, Z = np.meshgrid(cx, cy, cz, indexing="ij")
    S, P, T = intensity.shape
    acc = np.zeros(res, dtype=np.float64)

    def dist(pt):
        dx, dy, dz = X - pt[0], Y - pt[1], Z - pt[2]
        return np.sqrt(dx * dx + dy * dy + dz * dz)

    n_vox = X.size
    cache_pixels = P * n_vox * 8 <= 256 * 2**20
    dp_all = [dist(pixels[p]) for p in range(P)] if cache_pixels else None
    for s in range(S):
        dl = dist(lasers[s])
        al = dl / c
        dl2 = dl * dl
        for p in range(P):
            dp = dp_all[p] if cache_pixels else dist(pixels[p])
            t = ((al + dp / c) + ts[s]) + tp[p]
            k = np.floor((t - t0) / dt + 0.5)
            ok = (k >= 0) & (k < T)
            val = intensity[s, p][np.where(ok, k, 0).astype(np.int64)]
            if gcorr:
                val = val * (dl2 * (dp * dp))
            acc += np.where(ok, val, 0.0)
    return acc


def _to_voxel(tris, lo, h):
    return (np.asarray(tris, dtype=np.float64) - lo) / h


def _raster_cells(q, res):
    """Core rasterizer on voxel-space triangles ``q`` (F, 3, 3).

    Returns ``(tri_index, i, j, k)`` arrays in emission order: triangle by
    triangle, then first in-plane axis outer, second inner.
    """
    res = np.asarray(res, dtype=np.int64)
    q0, q1, q2 = q[:, 0], q[:, 1], q[:, 2]
    e1 = q1 - q0
    e2 = q2 - q0
    n = np.stack(
        [
            e1[:, 1] * e2[:, 2] - e1[:, 2] * e2[:, 1],
            e1[:, 2] * e2[:, 0] - e1[:, 0] * e2[:, 2],
            e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0],
        ],
        axis=1,
    )
    an = np.abs(n)
    dom = np.where((an[:, 0] >= an[:, 1]) & (an[:, 0] >= an[:, 2]), 0, np.where(an[:, 1] >= an[:, 2], 1, 2))
    # in-plane axes in increasing order; the second one has the smaller stride
    ax_a = np.where(dom == 0, 1, 0)
    ax_b = np.where(dom == 2, 1, 2)
    rows = np.arange(len(q))
    nd = n[rows, dom]
    qd = q[:, :, :][rows, :, dom]  # (F, 3)
    nd_res = res[dom]
    keep = (nd != 0) & (qd.max(axis=1) >= 0) & (qd.min(axis=1) < nd_res)

    A = np.stack([q0[rows, ax_a], q0[rows, ax_b]], axis=1)
    B = np.stack([q1[rows, ax_a], q1[rows, ax_b]], axis=1)
    C = np.stack([q2[rows, ax_a], q2[rows, ax_b]], axis=1)
    flip = np.where(dom == 1, -nd, nd) < 0
    B, C = np.where(flip[:, None], C, B), np.where(flip[:, None], B, C)

    pa = np.stack([A[:, 0], B[:, 0], C[:, 0]], axis=1)
    pb = np.stack([A[:, 1], B[:, 1], C[:, 1]], axis=1)
    ia0 = np.maximum(0, np.ceil(pa.min(axis=1) - 0.5))
    ia1 = np.minimum(res[ax_a] - 1, np.floor(pa.max(axis=1) - 0.5))
    ib0 = np.maximum(0, np.ceil(pb.min(axis=1) - 0.5))
    ib1 = np.minimum(res[ax_b] - 1, np.floor(pb.max(axis=1) - 0.5))
    na = np.where(keep, np.maximum(ia1 - ia0 + 1, 0), 0).astype(np.int64)
    nb = np.where(keep, np.maximum(ib1 - ib0 + 1, 0), 0).astype(np.int64)
    counts = na * nb
    total = int(counts.sum())
    empty = np.zeros(0, dtype=np.int64)
    if total == 0:
        return empty, empty, empty, empty

    tri = np.repeat(rows, counts)
    local = np.arange(total, dtype=np.int64) - np.repeat(np.cumsum(counts) - counts, counts)
    ia = ia0[tri].astype(np.int64) + local // nb[tri]
    ib = ib0[tri].astype(np.int64) + local % nb[tri]
    px = ia + 0.5
    py = ib + 0.5

    inside = np.ones(total, dtype=bool)
    verts = (A, B, C)
    for k in range(3):
        v, w = verts[k][tri], verts[(k + 1) % 3][tri]
        ea = w[:, 0] - v[:, 0]
        eb = w[:, 1] - v[:, 1]
        f = ea * (py - v[:, 1]) - eb * (px - v[:, 0])
        owner = (eb < 0) | ((eb == 0) & (ea > 0))
        inside &= (f > 0) | ((f == 0) & owner)

    dt, at, bt = dom[tri], ax_a[tri], ax_b[tri]
    q0t = q0[tri]
    nt = n[tri]
    r = np.arange(total)
    inv = 1.0 / nt[r, dt]
    depth = q0t[r, dt] - (nt[r, at] * (px - q0t[r, at]) + nt[r, bt] * (py - q0t[r, bt])) * inv
    inside &= (depth >= 0) & (depth < res[dt])

    tri, ia, ib, dt, at, bt, depth = (x[inside] for x in (tri, ia, ib, dt, at, bt, depth))
    ijk = np.empty((len(tri), 3), dtype=np.int64)
    r = np.arange(len(tri))
    ijk[r, dt] = np.floor(depth).astype(np.int64)
    ijk[r, at] = ia
    ijk[r, bt] = ib
    return tri, ijk[:, 0], ijk[:, 1], ijk[:, 2]


def rasterize(tris, lo, h, res):
    """Voxel indices (M, 3) emitted by world-space triangles (F, 3, 3)."""
    tris = np.asarray(tris, dtype=np.float64).reshape(-1, 3, 3)
    if len(tris) == 0:
        return np.zeros((0, 3), dtype=np.int64)
    _, i, j, k = _raster_cells(_to_voxel(tris, lo, h), res)
    return np.stack([i, j, k], axis=1)


def splat(values, lo, h, res, verts, voff, faces, foff, centers, rots, a, b, levels, weights, dedup, threads=1):
    """Rasterize and accumulate a batch of spheroids into ``values`` in place.

    ``values`` is the flat (C-order) accumulator, float64 or uint32.  Returns
    per-spheroid voxel touch counts.  Raises :class:`IntegerOverflowError`
    before any uint32 accumulator would wrap.
    """
    from .geometry import transform_points

    res = tuple(int(r) for r in res)
    is_int = values.dtype == np.uint32
    touches = np.zeros(len(weights), dtype=np.int64)
    for e in range(len(weights)):
        w = weights[e]
        lvl = levels[e]
        unit = verts[voff[lvl]:voff[lvl + 1]]
        tri_idx = faces[foff[lvl]:foff[lvl + 1]]
        world = transform_points(centers[e], rots[e], a[e], b[e], unit)
        q = _to_voxel(world[tri_idx], lo, h)
        _, i, j, k = _raster_cells(q, res)
        flat = (i * res[1] + j) * res[2] + k
        if dedup:
            flat = np.unique(flat)
            hits = np.ones(len(flat), dtype=np.int64)
        else:
            flat, hits = np.unique(flat, return_counts=True)
            hits = hits.astype(np.int64)
        touches[e] = int(hits.sum())
        if len(flat) == 0:
            continue
        if is_int:
            wi = np.uint64(int(w))
            after = values[flat].astype(np.uint64) + hits.astype(np.uint64) * wi
            if np.any(after > UINT32_MAX):
                raise IntegerOverflowError("uint32 voxel accumulator would overflow")
            values[flat] = after.astype(np.uint32)
        elif dedup:
            values[flat] += w
        else:
            # repeated hits add w one at a time, matching the compiled loop
            np.add.at(values, np.repeat(flat, hits), w)
    return touches

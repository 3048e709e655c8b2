# cython: language_level=3
"""Compiled hot loops: per-voxel back-projection and spheroid voxelization.

Mirrors ``_purepy`` operation for operation; see that module for the
reference semantics.  Parallel loops use OpenMP static scheduling, so the
assignment of work to threads depends only on the thread count.
"""

from cython.parallel cimport parallel, prange, threadid
from libc.math cimport ceil, fabs, floor, sqrt
from libc.stdint cimport int32_t, int64_t, uint32_t
from libc.stdlib cimport free, malloc

import numpy as np

from .errors import IntegerOverflowError

cdef extern from "_atomic.h" nogil:
    int nlos_add_u32(uint32_t *p, uint32_t w)
    int nlos_add_u32_plain(uint32_t *p, uint32_t w)

NAME = "cython"

cdef enum:
    SINK_COUNT = 0
    SINK_COLLECT = 1
    SINK_FLOAT = 2
    SINK_UINT = 3


ctypedef struct Sink:
    int kind
    int64_t *out
    int64_t n
    double *fvals
    uint32_t *uvals
    int32_t *stamp
    int32_t eid
    int dedup
    double fw
    uint32_t uw
    int64_t touches
    int overflow
    int shared
    int64_t st[3]


cdef inline void _emit_span(Sink *s, int64_t row, int64_t lo, int64_t hi, int64_t sb, int64_t sd,
                            double qd, double ra, double nb, double qb, double inv) noexcept nogil:
    cdef int64_t ib, idx
    cdef double depth
    if s.kind == SINK_COUNT:
        s.n += hi - lo + 1
        return
    for ib in range(lo, hi + 1):
        depth = qd - (ra + nb * ((ib + 0.5) - qb)) * inv
        idx = row + ib * sb + (<int64_t>floor(depth)) * sd
        if s.kind == SINK_COLLECT:
            s.out[s.n] = idx
            s.n += 1
            continue
        if s.dedup:
            if s.stamp[idx] == s.eid:
                continue
            s.stamp[idx] = s.eid
        s.touches += 1
        if s.kind == SINK_FLOAT:
            s.fvals[idx] += s.fw
        elif s.shared:
            if nlos_add_u32(&s.uvals[idx], s.uw):
                s.overflow = 1
        elif nlos_add_u32_plain(&s.uvals[idx], s.uw):
            s.overflow = 1


cdef inline bint _inside(double ea, double eb, double vx, double vy, bint owner,
                         double px, int64_t ib) noexcept nogil:
    cdef double f = ea * ((ib + 0.5) - vy) - eb * (px - vx)
    return f > 0 or (f == 0 and owner)


cdef void _raster_tri(const double *q, const int64_t *res, Sink *s) noexcept nogil:
    """Center-sampled rasterization of one voxel-space triangle (9 doubles).

    Each rounded edge function is monotone along a row, so the covered cells
    of a row form one contiguous span.  Span ends are located from the
    analytic crossing and then corrected with the exact per-cell test, which
    makes the output identical to testing every cell of the bounding box.
    """
    cdef double e1x = q[3] - q[0], e1y = q[4] - q[1], e1z = q[5] - q[2]
    cdef double e2x = q[6] - q[0], e2y = q[7] - q[1], e2z = q[8] - q[2]
    cdef double n[3]
    n[0] = e1y * e2z - e1z * e2y
    n[1] = e1z * e2x - e1x * e2z
    n[2] = e1x * e2y - e1y * e2x
    cdef double ax = fabs(n[0]), ay = fabs(n[1]), az = fabs(n[2])
    cdef int dom
    if ax >= ay and ax >= az:
        dom = 0
    elif ay >= az:
        dom = 1
    else:
        dom = 2
    # in-plane axes in increasing order, so rows run along the smaller stride
    cdef int a = 1 if dom == 0 else 0, b = 1 if dom == 2 else 2
    cdef double nd = n[dom]
    # orientation of the projected triangle in the (a, b) plane
    cdef double orient = -nd if dom == 1 else nd
    if nd == 0:
        return
    cdef double d0 = q[dom], d1 = q[3 + dom], d2 = q[6 + dom]
    if d0 < 0 and d1 < 0 and d2 < 0:
        return
    cdef double nres = <double>res[dom]
    if d0 >= nres and d1 >= nres and d2 >= nres:
        return

    cdef double vx[3]
    cdef double vy[3]
    vx[0] = q[a]
    vy[0] = q[b]
    if orient < 0:
        vx[1] = q[6 + a]; vy[1] = q[6 + b]
        vx[2] = q[3 + a]; vy[2] = q[3 + b]
    else:
        vx[1] = q[3 + a]; vy[1] = q[3 + b]
        vx[2] = q[6 + a]; vy[2] = q[6 + b]

    cdef double lo_a = vx[0], hi_a = vx[0], lo_b = vy[0], hi_b = vy[0]
    cdef int m
    for m in range(1, 3):
        if vx[m] < lo_a: lo_a = vx[m]
        if vx[m] > hi_a: hi_a = vx[m]
        if vy[m] < lo_b: lo_b = vy[m]
        if vy[m] > hi_b: hi_b = vy[m]
    cdef double fa0 = ceil(lo_a - 0.5), fa1 = floor(hi_a - 0.5)
    cdef double fb0 = ceil(lo_b - 0.5), fb1 = floor(hi_b - 0.5)
    if fa0 < 0: fa0 = 0
    if fb0 < 0: fb0 = 0
    if fa1 > <double>(res[a] - 1): fa1 = <double>(res[a] - 1)
    if fb1 > <double>(res[b] - 1): fb1 = <double>(res[b] - 1)
    if fa0 > fa1 or fb0 > fb1:
        return

    cdef double ea[3]
    cdef double eb[3]
    cdef bint owner[3]
    cdef double slope[3]
    for m in range(3):
        ea[m] = vx[(m + 1) % 3] - vx[m]
        eb[m] = vy[(m + 1) % 3] - vy[m]
        owner[m] = eb[m] < 0 or (eb[m] == 0 and ea[m] > 0)
        slope[m] = eb[m] / ea[m] if ea[m] != 0 else 0.0

    cdef double qa = q[a], qb = q[b], qd = q[dom], na = n[a], nb = n[b], ra, dl, dh
    cdef double inv = 1.0 / nd
    cdef int64_t sa = s.st[a], sb = s.st[b], sd = s.st[dom], row
    cdef int64_t ia, ib, lo, hi, g
    cdef int64_t ia0 = <int64_t>fa0, ia1 = <int64_t>fa1, ib0 = <int64_t>fb0, ib1 = <int64_t>fb1
    cdef double px, root
    cdef bint empty
    for ia in range(ia0, ia1 + 1):
        px = ia + 0.5
        lo = ib0
        hi = ib1
        empty = False
        for m in range(3):
            if ea[m] == 0:
                if not _inside(ea[m], eb[m], vx[m], vy[m], owner[m], px, lo):
                    empty = True
                    break
                continue
            # only a starting guess; the exact edge test below settles the span end
            root = vy[m] + slope[m] * (px - vx[m]) - 0.5
            if ea[m] > 0:
                # first covered cell: smallest ib inside this edge
                if root < <double>lo:
                    g = lo
                elif root > <double>(hi + 1):
                    g = hi + 1
                else:
                    g = <int64_t>ceil(root)
                while g > lo and _inside(ea[m], eb[m], vx[m], vy[m], owner[m], px, g - 1):
                    g -= 1
                while g <= hi and not _inside(ea[m], eb[m], vx[m], vy[m], owner[m], px, g):
                    g += 1
                lo = g
            else:
                if root < <double>(lo - 1):
                    g = lo - 1
                elif root > <double>hi:
                    g = hi
                else:
                    g = <int64_t>floor(root)
                while g < hi and _inside(ea[m], eb[m], vx[m], vy[m], owner[m], px, g + 1):
                    g += 1
                while g >= lo and not _inside(ea[m], eb[m], vx[m], vy[m], owner[m], px, g):
                    g -= 1
                hi = g
            if lo > hi:
                empty = True
                break
        if empty:
            continue
        ra = na * (px - qa)
        dl = qd - (ra + nb * ((lo + 0.5) - qb)) * inv
        dh = qd - (ra + nb * ((hi + 0.5) - qb)) * inv
        if not (dl >= 0 and dl < nres and dh >= 0 and dh < nres):
            # depth is monotone along the row too, so the in-range cells are one run
            while lo <= hi and not (dl >= 0 and dl < nres):
                lo += 1
                dl = qd - (ra + nb * ((lo + 0.5) - qb)) * inv
            while hi >= lo and not (dh >= 0 and dh < nres):
                hi -= 1
                dh = qd - (ra + nb * ((hi + 0.5) - qb)) * inv
            if lo > hi:
                continue
        _emit_span(s, ia * sa, lo, hi, sb, sd, qd, ra, nb, qb, inv)


def rasterize(tris, lo, double h, res):
    """Voxel indices (M, 3) emitted by world-space triangles (F, 3, 3)."""
    cdef const double[:, :, ::1] t = np.ascontiguousarray(tris, dtype=np.float64).reshape(-1, 3, 3)
    cdef const double[::1] lo_v = np.ascontiguousarray(lo, dtype=np.float64)
    cdef const int64_t[::1] r = np.ascontiguousarray(res, dtype=np.int64)
    cdef Py_ssize_t F = t.shape[0], f, v, c
    cdef double q[9]
    cdef Sink s
    s.kind = SINK_COUNT
    s.n = 0
    s.st[0] = r[1] * r[2]
    s.st[1] = r[2]
    s.st[2] = 1
    for f in range(F):
        for v in range(3):
            for c in range(3):
                q[3 * v + c] = (t[f, v, c] - lo_v[c]) / h
        _raster_tri(q, &r[0], &s)
    flat = np.empty(s.n, dtype=np.int64)
    if s.n == 0:
        return np.zeros((0, 3), dtype=np.int64)
    cdef int64_t[::1] o = flat
    s.kind = SINK_COLLECT
    s.out = &o[0]
    s.n = 0
    for f in range(F):
        for v in range(3):
            for c in range(3):
                q[3 * v + c] = (t[f, v, c] - lo_v[c]) / h
        _raster_tri(q, &r[0], &s)
    return np.stack(np.unravel_index(flat, (r[0], r[1], r[2])), axis=1).astype(np.int64)


def splat(values, lo, double h, res, verts, voff, faces, foff, centers, rots, a, b, levels, weights,
          bint dedup, int threads=1):
    """Rasterize and accumulate a batch of spheroids into ``values`` in place.

    Integer accumulation uses checked atomic adds on the shared grid.  Float
    accumulation with more than one thread goes through per-thread partial
    grids summed in thread order.
    """
    cdef bint is_int = values.dtype == np.uint32
    cdef int nthreads = max(1, threads)
    cdef const int64_t[::1] r = np.ascontiguousarray(res, dtype=np.int64)
    cdef int64_t X = r[0] * r[1] * r[2]
    cdef Py_ssize_t E = len(weights)

    cdef const double[::1] lo_v = np.ascontiguousarray(lo, dtype=np.float64)
    cdef const double[:, ::1] vt = np.ascontiguousarray(verts, dtype=np.float64)
    cdef const int64_t[::1] vo = np.ascontiguousarray(voff, dtype=np.int64)
    cdef const int32_t[:, ::1] fc = np.ascontiguousarray(faces, dtype=np.int32)
    cdef const int64_t[::1] fo = np.ascontiguousarray(foff, dtype=np.int64)
    cdef const double[:, ::1] cen = np.ascontiguousarray(centers, dtype=np.float64).reshape(-1, 3)
    cdef const double[:, :, ::1] rot = np.ascontiguousarray(rots, dtype=np.float64).reshape(-1, 3, 3)
    cdef const double[::1] av = np.ascontiguousarray(a, dtype=np.float64).reshape(-1)
    cdef const double[::1] bv = np.ascontiguousarray(b, dtype=np.float64).reshape(-1)
    cdef const int32_t[::1] lv = np.ascontiguousarray(levels, dtype=np.int32).reshape(-1)
    cdef const double[::1] wv = np.ascontiguousarray(weights, dtype=np.float64).reshape(-1)

    touches_arr = np.zeros(E, dtype=np.int64)
    cdef int64_t[::1] touches = touches_arr
    overflow_arr = np.zeros(nthreads, dtype=np.int32)
    cdef int32_t[::1] overflow = overflow_arr

    stamp_arr = np.zeros((nthreads, X if dedup else 1), dtype=np.int32)
    cdef int32_t[:, ::1] stamp = stamp_arr
    cdef bint use_partial = (not is_int) and nthreads > 1
    partial_arr = np.zeros((nthreads, X if use_partial else 1), dtype=np.float64)
    cdef double[:, ::1] partial = partial_arr

    cdef double[::1] fvals
    cdef uint32_t[::1] uvals
    cdef double *fbase = NULL
    cdef uint32_t *ubase = NULL
    if is_int:
        uvals = values
        ubase = &uvals[0]
    else:
        fvals = values
        fbase = &fvals[0]

    cdef int64_t maxv = 0
    cdef Py_ssize_t L = vo.shape[0] - 1, li
    for li in range(L):
        maxv = max(maxv, vo[li + 1] - vo[li])

    cdef Py_ssize_t e, f
    cdef int tid, lvl, vi, ci
    cdef double *buf
    cdef double *q
    cdef Sink *sk
    cdef double sx, sy, sz, w
    cdef int64_t v0, f0, f1, corner

    with nogil, parallel(num_threads=nthreads):
        tid = threadid()
        # per-thread scratch: transformed vertices, then one 9-double triangle
        buf = <double *>malloc((maxv * 3 + 9) * sizeof(double))
        q = buf + maxv * 3
        sk = <Sink *>malloc(sizeof(Sink))
        sk.st[0] = r[1] * r[2]
        sk.st[1] = r[2]
        sk.st[2] = 1
        sk.dedup = dedup
        sk.shared = nthreads > 1
        sk.stamp = &stamp[tid, 0]
        if is_int:
            sk.kind = SINK_UINT
            sk.uvals = ubase
        else:
            sk.kind = SINK_FLOAT
            sk.fvals = &partial[tid, 0] if use_partial else fbase
        for e in prange(E, schedule="static"):
            lvl = lv[e]
            v0 = vo[lvl]
            for vi in range(<int>(vo[lvl + 1] - v0)):
                sx = av[e] * vt[v0 + vi, 0]
                sy = bv[e] * vt[v0 + vi, 1]
                sz = bv[e] * vt[v0 + vi, 2]
                for ci in range(3):
                    buf[3 * vi + ci] = (cen[e, ci] + ((rot[e, ci, 0] * sx + rot[e, ci, 1] * sy)
                                                      + rot[e, ci, 2] * sz) - lo_v[ci]) / h
            w = wv[e]
            sk.fw = w
            if is_int:
                sk.uw = <uint32_t>w
            sk.eid = <int32_t>(e + 1)
            sk.touches = 0
            sk.overflow = 0
            f0 = fo[lvl]
            f1 = fo[lvl + 1]
            for f in range(f0, f1):
                for corner in range(3):
                    vi = fc[f, corner]
                    q[3 * corner] = buf[3 * vi]
                    q[3 * corner + 1] = buf[3 * vi + 1]
                    q[3 * corner + 2] = buf[3 * vi + 2]
                _raster_tri(q, &r[0], sk)
            touches[e] = sk.touches
            if sk.overflow:
                overflow[tid] = 1
        free(sk)
        free(buf)

    if overflow_arr.any():
        raise IntegerOverflowError("uint32 voxel accumulator would overflow")
    if use_partial:
        for tid in range(nthreads):
            values += partial_arr[tid]
    return touches_arr


def backproject(lo, double h, res, lasers, ts, pixels, tp, intensity, double t0, double dt, double c,
                bint gcorr, int threads=1):
    """Per-voxel back-projection; returns float64 sums of shape ``res``."""
    cdef const int64_t[::1] r = np.ascontiguousarray(res, dtype=np.int64)
    cdef const double[::1] lo_v = np.ascontiguousarray(lo, dtype=np.float64)
    cdef const double[:, ::1] L = np.ascontiguousarray(lasers, dtype=np.float64).reshape(-1, 3)
    cdef const double[:, ::1] Pw = np.ascontiguousarray(pixels, dtype=np.float64).reshape(-1, 3)
    cdef const double[::1] tsv = np.ascontiguousarray(ts, dtype=np.float64)
    cdef const double[::1] tpv = np.ascontiguousarray(tp, dtype=np.float64)
    cdef const double[:, :, ::1] I = np.ascontiguousarray(intensity, dtype=np.float64)
    cdef Py_ssize_t S = I.shape[0], P = I.shape[1], T = I.shape[2]
    cdef int64_t X = r[0] * r[1] * r[2], ny = r[1], nz = r[2]
    out_arr = np.zeros(X, dtype=np.float64)
    cdef double[::1] out = out_arr
    cdef int nthreads = max(1, threads)

    cdef int64_t v, i, j, k
    cdef Py_ssize_t s, p
    cdef double cx, cy, cz, dx, dy, dz, d, acc, t, kf, val, als, tss, dls
    cdef double *al
    cdef double *dl2
    cdef double *bp
    cdef double *dp2
    cdef int64_t kb

    with nogil, parallel(num_threads=nthreads):
        al = <double *>malloc(S * sizeof(double))
        dl2 = <double *>malloc(S * sizeof(double))
        bp = <double *>malloc(P * sizeof(double))
        dp2 = <double *>malloc(P * sizeof(double))
        for v in prange(X, schedule="static"):
            i = v // (ny * nz)
            j = (v // nz) % ny
            k = v % nz
            cx = lo_v[0] + (i + 0.5) * h
            cy = lo_v[1] + (j + 0.5) * h
            cz = lo_v[2] + (k + 0.5) * h
            for s in range(S):
                dx = cx - L[s, 0]
                dy = cy - L[s, 1]
                dz = cz - L[s, 2]
                d = sqrt(dx * dx + dy * dy + dz * dz)
                al[s] = d / c
                dl2[s] = d * d
            for p in range(P):
                dx = cx - Pw[p, 0]
                dy = cy - Pw[p, 1]
                dz = cz - Pw[p, 2]
                d = sqrt(dx * dx + dy * dy + dz * dz)
                bp[p] = d / c
                dp2[p] = d * d
            acc = 0.0
            for s in range(S):
                als = al[s]
                tss = tsv[s]
                dls = dl2[s]
                for p in range(P):
                    t = ((als + bp[p]) + tss) + tpv[p]
                    kf = floor((t - t0) / dt + 0.5)
                    if kf >= 0 and kf < T:
                        kb = <int64_t>kf
                        val = I[s, p, kb]
                        if gcorr:
                            val = val * (dls * dp2[p])
                        acc = acc + val
            out[v] = acc
        free(al)
        free(dl2)
        free(bp)
        free(dp2)
    return out_arr.reshape((r[0], r[1], r[2]))

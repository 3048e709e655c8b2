"""Prolate spheroids, the tessellated-sphere atlas, and the shell oracle.

A measurement at wall pixel ``p`` lit from ``l`` with total path length ``d``
constrains the reflector to the spheroid ``|x-l| + |x-p| = d``.  Reconstruction
renders that surface by instancing a precomputed geodesic sphere through the
affine map ``x = center + R @ diag(a, b, b) @ u``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .errors import DegenerateEllipsoidError, ValidationError

#: Relative slack in the degeneracy test ``d <= |l-p| * (1 + EPS_DEG)``.
EPS_DEG = 1e-9
MAX_ATLAS_LEVEL = 7


# -- spheroids ----------------------------------------------------------------


def _frames(axis: np.ndarray) -> np.ndarray:
    """Orthonormal frames whose first column is along ``axis`` (E, 3) -> (E, 3, 3).

    Zero-length axes get the identity.  The second column is the coordinate
    axis least aligned with the first, Gram-Schmidt orthogonalised, so an
    axis along +x yields the identity as well.
    """
    axis = np.asarray(axis, dtype=np.float64).reshape(-1, 3)
    n = len(axis)
    length = np.linalg.norm(axis, axis=1)
    zero = length == 0
    e1 = np.where(zero[:, None], [1.0, 0.0, 0.0], axis / np.where(zero, 1.0, length)[:, None])
    helper = np.zeros((n, 3))
    helper[np.arange(n), np.argmin(np.abs(e1), axis=1)] = 1.0
    e2 = helper - np.sum(helper * e1, axis=1)[:, None] * e1
    e2 /= np.linalg.norm(e2, axis=1)[:, None]
    e3 = np.cross(e1, e2)
    rot = np.stack([e1, e2, e3], axis=2)
    rot[zero] = np.eye(3)
    return rot


def spheroid_params(l, p, d):
    """Vectorised spheroid construction.

    Returns ``(center, rotation, a, b, degenerate)`` for arrays of foci
    ``l``, ``p`` (E, 3) and path lengths ``d`` (E,).  Degenerate entries
    (``d <= |l-p| + EPS_DEG*|l-p|`` or ``d <= 0``) have ``b = 0``.
    """
    l = np.asarray(l, dtype=np.float64).reshape(-1, 3)
    p = np.asarray(p, dtype=np.float64).reshape(-1, 3)
    d = np.asarray(d, dtype=np.float64).reshape(-1)
    axis = p - l
    sep = np.linalg.norm(axis, axis=1)
    degenerate = ~(d > sep + EPS_DEG * sep) | ~(d > 0)
    a = d / 2
    f = sep / 2
    b = np.sqrt(np.where(degenerate, 0.0, a * a - f * f))
    center = (l + p) / 2
    return center, _frames(axis), a, b, degenerate


def transform_points(center, rotation, a, b, unit):
    """Map unit-sphere points through ``center + R diag(a,b,b)``.

    The summation order is fixed; the compiled kernel reproduces it exactly.
    """
    unit = np.asarray(unit, dtype=np.float64)
    sx, sy, sz = a * unit[..., 0], b * unit[..., 1], b * unit[..., 2]
    r = rotation
    return np.stack(
        [center[i] + ((r[i, 0] * sx + r[i, 1] * sy) + r[i, 2] * sz) for i in range(3)],
        axis=-1,
    )


@dataclass(frozen=True)
class ProlateSpheroid:
    focus_a: np.ndarray
    focus_b: np.ndarray
    path_length: float
    semi_major: float
    semi_minor: float
    center: np.ndarray
    rotation: np.ndarray

    @property
    def focal_half_distance(self) -> float:
        return float(np.linalg.norm(self.focus_b - self.focus_a)) / 2

    @cached_property
    def linear(self) -> np.ndarray:
        return self.rotation * np.array([self.semi_major, self.semi_minor, self.semi_minor])

    @cached_property
    def transform(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.linear
        m[:3, 3] = self.center
        return m

    def path_sum(self, y) -> np.ndarray:
        y = np.asarray(y, dtype=np.float64)
        return np.linalg.norm(y - self.focus_a, axis=-1) + np.linalg.norm(y - self.focus_b, axis=-1)

    def map_unit(self, unit) -> np.ndarray:
        return transform_points(self.center, self.rotation, self.semi_major, self.semi_minor, unit)


def ellipsoid_from_measurement(l, p, d: float) -> ProlateSpheroid:
    """Spheroid of all points with ``|x-l| + |x-p| = d``."""
    if not d > 0:
        raise ValidationError(f"path length must be positive, got {d}")
    center, rot, a, b, degenerate = spheroid_params(l, p, [d])
    if degenerate[0]:
        sep = float(np.linalg.norm(np.subtract(p, l)))
        raise DegenerateEllipsoidError(f"path length {d} does not exceed focal distance {sep}")
    return ProlateSpheroid(
        focus_a=np.asarray(l, dtype=np.float64),
        focus_b=np.asarray(p, dtype=np.float64),
        path_length=float(d),
        semi_major=float(a[0]),
        semi_minor=float(b[0]),
        center=center[0],
        rotation=rot[0],
    )


# -- sphere atlas -------------------------------------------------------------


def _icosahedron():
    phi = (1 + math.sqrt(5)) / 2
    v = np.array(
        [
            [-1, phi, 0], [1, phi, 0], [-1, -phi, 0], [1, -phi, 0],
            [0, -1, phi], [0, 1, phi], [0, -1, -phi], [0, 1, -phi],
            [phi, 0, -1], [phi, 0, 1], [-phi, 0, -1], [-phi, 0, 1],
        ],
        dtype=np.float64,
    )
    v /= np.linalg.norm(v, axis=1)[:, None]
    f = np.array(
        [
            [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
            [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
            [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
            [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
        ],
        dtype=np.int32,
    )
    return v, f


def _subdivide(verts: np.ndarray, tris: np.ndarray):
    verts = list(map(tuple, verts))
    cache: dict[tuple[int, int], int] = {}

    def mid(i, j):
        key = (i, j) if i < j else (j, i)
        if key not in cache:
            m = np.add(verts[i], verts[j])
            m /= np.linalg.norm(m)
            cache[key] = len(verts)
            verts.append(tuple(m))
        return cache[key]

    out = []
    for a, b, c in tris.tolist():
        ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
        out += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
    return np.array(verts, dtype=np.float64), np.array(out, dtype=np.int32)


def chordal_error(verts: np.ndarray, tris: np.ndarray) -> float:
    """Largest gap between the unit sphere and a mesh inscribed in it.

    For each face the sphere bulges furthest above the plane along the plane
    normal, by ``1 - distance(origin, plane)``.
    """
    v0, v1, v2 = verts[tris[:, 0]], verts[tris[:, 1]], verts[tris[:, 2]]
    n = np.cross(v1 - v0, v2 - v0)
    h = np.abs(np.sum(n * v0, axis=1)) / np.linalg.norm(n, axis=1)
    return float(1.0 - h.min())


@dataclass(frozen=True)
class TessellatedSphere:
    level: int
    vertices: np.ndarray  # (V, 3) unit vectors
    faces: np.ndarray  # (F, 3) vertex indices, outward winding
    alpha: float

    @property
    def triangle_count(self) -> int:
        return len(self.faces)

    @property
    def triangles(self) -> np.ndarray:
        return self.vertices[self.faces]


@dataclass(frozen=True)
class SphereAtlas:
    levels: tuple[TessellatedSphere, ...]

    @property
    def max_level(self) -> int:
        return self.levels[-1].level

    @cached_property
    def alphas(self) -> np.ndarray:
        return np.array([s.alpha for s in self.levels])

    @cached_property
    def packed(self):
        """Concatenated vertex/face tables with per-level offsets (for the kernels)."""
        verts = np.ascontiguousarray(np.concatenate([s.vertices for s in self.levels]))
        faces = np.ascontiguousarray(np.concatenate([s.faces for s in self.levels]).astype(np.int32))
        voff = np.cumsum([0] + [len(s.vertices) for s in self.levels]).astype(np.int64)
        foff = np.cumsum([0] + [len(s.faces) for s in self.levels]).astype(np.int64)
        return verts, voff, faces, foff

    def __getitem__(self, level: int) -> TessellatedSphere:
        return self.levels[level]


def build_sphere_atlas(max_level: int) -> SphereAtlas:
    """Icosahedron plus ``max_level`` rounds of 4-way geodesic subdivision."""
    if not 0 <= max_level <= MAX_ATLAS_LEVEL:
        raise ValidationError(f"max_level must be in [0, {MAX_ATLAS_LEVEL}], got {max_level}")
    verts, faces = _icosahedron()
    levels = []
    for o in range(max_level + 1):
        if o:
            verts, faces = _subdivide(verts, faces)
        for arr in (verts, faces):
            arr.flags.writeable = False
        levels.append(TessellatedSphere(o, verts, faces, chordal_error(verts, faces)))
    return SphereAtlas(tuple(levels))


def select_levels(alphas: np.ndarray, semi_major, epsilon: float):
    """Vectorised level choice: smallest ``o`` with ``alpha_o * a < epsilon``.

    Returns ``(levels, saturated)``; saturated entries are clamped to the
    finest level.
    """
    if not epsilon > 0:
        raise ValidationError("epsilon must be positive")
    a = np.asarray(semi_major, dtype=np.float64).reshape(-1)
    ok = alphas[None, :] * a[:, None] < epsilon
    saturated = ~ok.any(axis=1)
    levels = np.where(saturated, len(alphas) - 1, np.argmax(ok, axis=1))
    return levels.astype(np.int32), saturated


def select_tessellation_level(atlas: SphereAtlas, spheroid: ProlateSpheroid, epsilon: float) -> tuple[int, bool]:
    # largest singular value of R diag(a, b, b) is the semi-major axis
    levels, sat = select_levels(atlas.alphas, [spheroid.semi_major], epsilon)
    return int(levels[0]), bool(sat[0])


def transform_triangles(spheroid: ProlateSpheroid, sphere: TessellatedSphere) -> np.ndarray:
    """World-space triangles (F, 3, 3) of ``sphere`` mapped onto ``spheroid``."""
    return spheroid.map_unit(sphere.vertices)[sphere.faces]


# -- analytic oracle ----------------------------------------------------------

_INVPHI = (math.sqrt(5) - 1) / 2


def _segment_hits_box(a, b, lo, hi):
    """Slab test: does segment ``a -> b`` meet each box (N, 3)?"""
    direction = b - a
    t_enter = np.zeros(len(lo))
    t_exit = np.ones(len(lo))
    hit = np.ones(len(lo), dtype=bool)
    for i in range(3):
        if direction[i] == 0.0:
            hit &= (a[i] >= lo[:, i]) & (a[i] <= hi[:, i])
            continue
        t1 = (lo[:, i] - a[i]) / direction[i]
        t2 = (hi[:, i] - a[i]) / direction[i]
        t_enter = np.maximum(t_enter, np.minimum(t1, t2))
        t_exit = np.minimum(t_exit, np.maximum(t1, t2))
    return hit & (t_enter <= t_exit)


def _corner_max(spheroid: ProlateSpheroid, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    corners = np.stack(
        [np.stack([np.where(m >> i & 1, hi[:, i], lo[:, i]) for i in range(3)], axis=1) for m in range(8)],
        axis=1,
    )
    return spheroid.path_sum(corners).max(axis=1)


def path_sum_range(spheroid: ProlateSpheroid, lo, hi, max_sweeps: int = 200):
    """Min and max of ``F(y) = |y-a| + |y-b|`` over boxes ``[lo, hi]`` (N, 3).

    F is convex, so the maximum sits at a corner.  The minimum is found by
    cyclic per-axis golden-section search, run in lock-step for all boxes,
    until a sweep improves no box by more than ``1e-9 * d``.  When the focal
    segment crosses a box the global minimum ``|a-b|`` is exact.
    """
    lo = np.atleast_2d(np.asarray(lo, dtype=np.float64))
    hi = np.atleast_2d(np.asarray(hi, dtype=np.float64))
    fa, fb = spheroid.focus_a, spheroid.focus_b
    F = spheroid.path_sum
    fmax = _corner_max(spheroid, lo, hi)

    tol = 1e-9 * spheroid.path_length
    width = hi - lo
    y = np.clip((fa + fb) / 2, lo, hi)
    fy = F(y)
    for _ in range(max_sweeps):
        before = fy.copy()
        for i in range(3):
            w = width[:, i]
            if not np.any(w > 0):
                continue
            # F is 2-Lipschitz: a bracket narrower than tol/4 pins F to within tol/2
            iters = int(math.ceil(math.log(max(w.max(), tol) / (tol / 4)) / -math.log(_INVPHI)))
            x0, x1 = lo[:, i].copy(), hi[:, i].copy()
            yc, ye = y.copy(), y.copy()
            for _ in range(iters):
                c = x1 - _INVPHI * (x1 - x0)
                e = x0 + _INVPHI * (x1 - x0)
                yc[:, i], ye[:, i] = c, e
                left = F(yc) < F(ye)
                x1 = np.where(left, e, x1)
                x0 = np.where(left, x0, c)
            trial = y.copy()
            trial[:, i] = np.where(w > 0, (x0 + x1) / 2, y[:, i])
            ft = F(trial)
            better = ft < fy
            y[better] = trial[better]
            fy = np.where(better, ft, fy)
        if np.all(before - fy <= tol):
            break
    point = np.all(width == 0, axis=1)
    on_segment = _segment_hits_box(fa, fb, lo, hi) & ~point
    fmin = np.where(on_segment, np.linalg.norm(fb - fa), fy)
    return fmin, fmax


def shell_overlap_many(spheroid: ProlateSpheroid, lo, hi, shell_halfwidth: float) -> np.ndarray:
    """Vectorised :func:`shell_overlap_oracle` over boxes ``[lo, hi]`` (N, 3)."""
    if not shell_halfwidth >= 0:
        raise ValidationError("shell_halfwidth must be >= 0")
    lo = np.atleast_2d(np.asarray(lo, dtype=np.float64))
    hi = np.atleast_2d(np.asarray(hi, dtype=np.float64))
    d = spheroid.path_length
    reach = _corner_max(spheroid, lo, hi) >= d - shell_halfwidth
    # F at the clamped focal midpoint bounds the box minimum from above; only
    # boxes it cannot settle need the iterative search
    low = spheroid.path_sum(np.clip((spheroid.focus_a + spheroid.focus_b) / 2, lo, hi)) <= d + shell_halfwidth
    out = reach & low
    todo = reach & ~low
    if todo.any():
        fmin, _ = path_sum_range(spheroid, lo[todo], hi[todo])
        out[todo] = fmin <= d + shell_halfwidth
    return out


def shell_overlap_oracle(spheroid: ProlateSpheroid, box, shell_halfwidth: float) -> bool:
    """Does the shell ``|F - d| <= shell_halfwidth`` meet the box ``(lo, hi)``?"""
    lo, hi = box
    return bool(shell_overlap_many(spheroid, [lo], [hi], shell_halfwidth)[0])

"""Voxel grid, triangle rasterization and spheroid splatting.

Triangles are voxelized by projecting onto the plane orthogonal to the
dominant normal axis and sampling 2D cell centres (thin, non-conservative
voxelization).  Shared edges follow a top-left fill rule so a cell centre on
an edge is claimed by exactly one of the two triangles.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import _backend
from .errors import GeometryMismatchError, IntegerOverflowError, ResolutionOverflowError, ValidationError
from .geometry import ProlateSpheroid, SphereAtlas, select_levels

MODES = ("int", "float")
UINT32_MAX = 2**32 - 1
#: Largest accepted integer-mode weight (intensities are quantized to 0..255).
MAX_INT_WEIGHT = 255
DEFAULT_MEMORY_CAP = 2 * 2**30


def memory_cap() -> int:
    """Byte budget for one accumulator array (``NLOSVOX_MEMORY_CAP`` overrides)."""
    raw = os.environ.get("NLOSVOX_MEMORY_CAP")
    return int(float(raw)) if raw else DEFAULT_MEMORY_CAP


@dataclass
class VoxelGrid:
    """Axis-aligned grid of cubic voxels.

    ``values[i, j, k]`` belongs to the voxel whose centre is
    ``lo + (ijk + 0.5) * voxel_size``.
    """

    lo: np.ndarray
    hi: np.ndarray
    resolution: tuple[int, int, int]
    voxel_size: float
    mode: str = "float"
    values: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValidationError(f"mode must be one of {MODES}, got {self.mode!r}")
        self.lo = np.asarray(self.lo, dtype=np.float64)
        self.hi = np.asarray(self.hi, dtype=np.float64)
        self.resolution = tuple(int(r) for r in self.resolution)
        dtype = np.uint32 if self.mode == "int" else np.float64
        if self.values is None:
            self.values = np.zeros(self.resolution, dtype=dtype)
        elif self.values.shape != self.resolution or self.values.dtype != dtype:
            raise ValidationError("values array does not match resolution/mode")

    @property
    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        return self.lo, self.hi

    @property
    def size(self) -> int:
        return int(np.prod(self.resolution))

    def same_geometry(self, other: "VoxelGrid") -> bool:
        return (
            self.resolution == other.resolution
            and np.array_equal(self.lo, other.lo)
            and np.array_equal(self.hi, other.hi)
        )

    def axis_centers(self, axis: int) -> np.ndarray:
        return self.lo[axis] + (np.arange(self.resolution[axis]) + 0.5) * self.voxel_size

    def centers(self) -> np.ndarray:
        """All voxel centres, (Nx, Ny, Nz, 3)."""
        return np.stack(np.meshgrid(*(self.axis_centers(i) for i in range(3)), indexing="ij"), axis=-1)

    def voxel_box(self, ijk) -> tuple[np.ndarray, np.ndarray]:
        lo = self.lo + np.asarray(ijk) * self.voxel_size
        return lo, lo + self.voxel_size

    def index_of(self, point) -> tuple[int, int, int] | None:
        ijk = np.floor((np.asarray(point, dtype=np.float64) - self.lo) / self.voxel_size).astype(int)
        if np.any(ijk < 0) or np.any(ijk >= self.resolution):
            return None
        return tuple(int(x) for x in ijk)

    def normalized(self) -> np.ndarray:
        """Float copy of the values scaled so the maximum is 1 (all-zero stays zero)."""
        v = self.values.astype(np.float64)
        peak = v.max(initial=0.0)
        return v / peak if peak > 0 else v

    def copy(self) -> "VoxelGrid":
        return VoxelGrid(self.lo.copy(), self.hi.copy(), self.resolution, self.voxel_size, self.mode, self.values.copy())

    @classmethod
    def from_box(cls, lo, hi, resolution, mode: str = "float", values=None) -> "VoxelGrid":
        """Grid spanning ``[lo, hi]`` with the voxel edge derived from the box.

        The edge is measured along the axis with the most voxels, so a grid
        rebuilt from its stored box and resolution matches bit for bit.
        """
        lo = np.asarray(lo, dtype=np.float64)
        hi = np.asarray(hi, dtype=np.float64)
        res = tuple(int(r) for r in resolution)
        a = int(np.argmax(res))
        return cls(lo, hi, res, float((hi[a] - lo[a]) / res[a]), mode, values)

    def like(self, mode: str | None = None, values=None) -> "VoxelGrid":
        return VoxelGrid(self.lo.copy(), self.hi.copy(), self.resolution, self.voxel_size, mode or self.mode, values)


def grid_new(bounds, n: int, mode: str = "float", *, cap_bytes: int | None = None) -> VoxelGrid:
    """Grid of ``n`` cubic voxels along the longest side of ``bounds``.

    Shorter sides get ``ceil(extent / edge)`` voxels and are padded
    symmetrically so the voxels tile the grid exactly.
    """
    if int(n) != n or n < 1:
        raise ValidationError(f"linear resolution must be a positive integer, got {n}")
    if mode not in MODES:
        raise ValidationError(f"mode must be one of {MODES}, got {mode!r}")
    lo, hi = (np.asarray(b, dtype=np.float64).reshape(3) for b in bounds)
    ext = hi - lo
    if not np.all(np.isfinite(ext)) or np.any(ext < 0) or ext.max() <= 0:
        raise ValidationError(f"bounds must be a non-empty box, got {lo} .. {hi}")
    edge = float(ext.max()) / n
    counts = [max(1, math.ceil(e / edge - 1e-9)) for e in ext]
    counts[int(np.argmax(ext))] = int(n)
    need = int(np.prod(counts)) * (4 if mode == "int" else 8)
    cap = memory_cap() if cap_bytes is None else cap_bytes
    if need > cap:
        raise ResolutionOverflowError(f"grid {counts} needs {need} bytes, cap is {cap}")
    center = (lo + hi) / 2
    new_lo = center - np.array(counts) * edge / 2
    new_hi = new_lo + np.array(counts) * edge
    return VoxelGrid.from_box(new_lo, new_hi, counts, mode)


# -- rasterization ------------------------------------------------------------


def rasterize_triangles(grid: VoxelGrid, tris, backend=None) -> np.ndarray:
    """Voxel indices (M, 3) emitted by triangles (F, 3, 3), in emission order.

    Indices outside the grid are discarded.
    """
    k = _backend.load(backend) if backend else _backend.kernels
    return k.rasterize(np.asarray(tris, dtype=np.float64).reshape(-1, 3, 3), grid.lo, grid.voxel_size, grid.resolution)


def rasterize_triangle(grid: VoxelGrid, tri, backend=None) -> np.ndarray:
    return rasterize_triangles(grid, np.asarray(tri, dtype=np.float64).reshape(1, 3, 3), backend)


# -- splatting ----------------------------------------------------------------


@dataclass
class SplatStats:
    ellipsoids: int = 0
    triangles: int = 0
    touches: int = 0
    saturated: int = 0
    levels: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int32))


def _check_weights(grid: VoxelGrid, weights: np.ndarray) -> np.ndarray:
    w = np.asarray(weights, dtype=np.float64).reshape(-1)
    if np.any(~(w >= 0)) or not np.all(np.isfinite(w)):
        raise ValidationError("splat weights must be finite and >= 0")
    if grid.mode == "int" and (np.any(w > MAX_INT_WEIGHT) or np.any(w != np.floor(w))):
        raise ValidationError("integer-mode weights must be integers in [0, 255]")
    return w


def splat_batch(
    grid: VoxelGrid,
    centers,
    rotations,
    semi_major,
    semi_minor,
    weights,
    atlas: SphereAtlas,
    epsilon: float,
    *,
    dedup: bool = True,
    threads: int = 1,
    backend=None,
) -> SplatStats:
    """Splat many spheroids (already built by :func:`geometry.spheroid_params`).

    Zero-weight spheroids are dropped before rasterization.  With ``dedup``
    each spheroid adds its weight at most once per voxel; otherwise once per
    (triangle, voxel) emission.
    """
    w = _check_weights(grid, weights)
    keep = w > 0
    a = np.asarray(semi_major, dtype=np.float64).reshape(-1)[keep]
    levels, saturated = select_levels(atlas.alphas, a, epsilon)
    stats = SplatStats(ellipsoids=int(keep.sum()), saturated=int(saturated.sum()), levels=levels)
    if not stats.ellipsoids:
        return stats
    verts, voff, faces, foff = atlas.packed
    stats.triangles = int((foff[levels + 1] - foff[levels]).sum())
    k = _backend.load(backend) if backend else _backend.kernels
    flat = grid.values.reshape(-1)
    touches = k.splat(
        flat,
        grid.lo,
        grid.voxel_size,
        grid.resolution,
        verts,
        voff,
        faces,
        foff,
        np.asarray(centers, dtype=np.float64).reshape(-1, 3)[keep],
        np.asarray(rotations, dtype=np.float64).reshape(-1, 3, 3)[keep],
        a,
        np.asarray(semi_minor, dtype=np.float64).reshape(-1)[keep],
        levels,
        w[keep],
        bool(dedup),
        int(threads),
    )
    stats.touches = int(touches.sum())
    return stats


def splat_ellipsoid(
    grid: VoxelGrid,
    spheroid: ProlateSpheroid,
    weight: float,
    atlas: SphereAtlas,
    epsilon: float,
    dedup: bool = True,
    backend=None,
) -> SplatStats:
    """Voxelize one spheroid into ``grid`` (in place) and report what it cost."""
    if grid.mode == "int":
        _headroom_check(grid, weight)
    return splat_batch(
        grid,
        spheroid.center[None],
        spheroid.rotation[None],
        [spheroid.semi_major],
        [spheroid.semi_minor],
        [weight],
        atlas,
        epsilon,
        dedup=dedup,
        backend=backend,
    )


def _headroom_check(grid: VoxelGrid, weight: float) -> None:
    if int(grid.values.max(initial=0)) + MAX_INT_WEIGHT > UINT32_MAX:
        raise IntegerOverflowError(f"grid maximum {int(grid.values.max())} leaves no headroom for weight {weight}")


def quantize_weights(intensity, peak: float | None = None) -> np.ndarray:
    """Map intensities to integers ``round(255 * I / peak)`` (ties round up)."""
    intensity = np.asarray(intensity, dtype=np.float64)
    if peak is None:
        peak = float(intensity.max(initial=0.0))
    if peak <= 0:
        return np.zeros_like(intensity)
    return np.floor(255.0 * intensity / peak + 0.5)


# -- post-processing ----------------------------------------------------------


def laplacian_filter(grid: VoxelGrid) -> VoxelGrid:
    """Clamped 6-neighbour negative Laplacian, max-normalized to [0, 1].

    Voxels outside the grid count as zero.
    """
    v = grid.values.astype(np.float64)
    p = np.pad(v, 1)
    neigh = (
        p[:-2, 1:-1, 1:-1] + p[2:, 1:-1, 1:-1]
        + p[1:-1, :-2, 1:-1] + p[1:-1, 2:, 1:-1]
        + p[1:-1, 1:-1, :-2] + p[1:-1, 1:-1, 2:]
    )
    out = np.maximum(0.0, 6.0 * v - neigh)
    peak = out.max(initial=0.0)
    if peak > 0:
        out /= peak
    return grid.like("float", out)


@dataclass(frozen=True)
class Comparison:
    mse: float
    pearson: float
    peak_offset: int


def grid_compare(a: VoxelGrid, b: VoxelGrid) -> Comparison:
    """MSE and Pearson correlation of max-normalized grids, and argmax distance.

    ``peak_offset`` is the Chebyshev distance between the first maxima.
    A constant grid has no defined correlation; two identical constant grids
    score 1, otherwise 0.
    """
    if not a.same_geometry(b):
        raise GeometryMismatchError(
            f"grids differ: {a.resolution} [{a.lo}, {a.hi}] vs {b.resolution} [{b.lo}, {b.hi}]"
        )
    x = a.normalized().ravel()
    y = b.normalized().ravel()
    mse = float(np.mean((x - y) ** 2))
    xc, yc = x - x.mean(), y - y.mean()
    denom = math.sqrt(float(xc @ xc) * float(yc @ yc))
    if denom > 0:
        pearson = float(np.clip((xc @ yc) / denom, -1.0, 1.0))
    else:
        pearson = 1.0 if np.array_equal(x, y) else 0.0
    ia = np.array(np.unravel_index(np.argmax(a.values), a.resolution))
    ib = np.array(np.unravel_index(np.argmax(b.values), b.resolution))
    return Comparison(mse, pearson, int(np.abs(ia - ib).max()))

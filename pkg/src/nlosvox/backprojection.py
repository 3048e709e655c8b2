"""Traditional and ellipsoid-voxelization back-projection.

Both methods accumulate a confidence volume from a :class:`TransientDataset`:

* ``traditional`` visits every voxel centre and sums, over all (shot, pixel)
  pairs, the intensity recorded at that centre's three-bounce arrival time;
* ``fast`` visits every non-zero (shot, pixel, bin) sample instead and
  voxelizes the spheroid of points consistent with it.
"""

from __future__ import annotations

import os
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import _backend
from .errors import ConfigConflictError, IntegerOverflowError, ValidationError
from .geometry import build_sphere_atlas, spheroid_params
from .transient import TransientDataset
from .voxelizer import UINT32_MAX, VoxelGrid, grid_new, laplacian_filter, quantize_weights, splat_batch

METHODS = ("traditional", "fast")


@dataclass
class ReconstructionConfig:
    bounds: object = "auto"
    linear_resolution: int = 64
    method: str = "fast"
    mode: str = "float"
    #: absolute tessellation tolerance in meters; None means ``epsilon_voxels`` voxel edges
    epsilon: float | None = None
    epsilon_voxels: float = 1.0
    intensity_threshold: float = 0.0
    g_correction: bool = False
    dedup: bool = True
    max_tess_level: int = 5
    threads: int | None = None
    backend: str | None = None

    def validate(self) -> None:
        if int(self.linear_resolution) != self.linear_resolution or self.linear_resolution < 1:
            raise ValidationError(f"linear_resolution must be >= 1, got {self.linear_resolution}")
        if self.method not in METHODS:
            raise ValidationError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.mode not in ("int", "float"):
            raise ValidationError(f"mode must be 'int' or 'float', got {self.mode!r}")
        if not 0.0 <= self.intensity_threshold < 1.0:
            raise ValidationError("intensity_threshold must lie in [0, 1)")
        if self.epsilon is not None and not self.epsilon > 0:
            raise ValidationError("epsilon must be positive")
        if not self.epsilon_voxels > 0:
            raise ValidationError("epsilon_voxels must be positive")
        if self.g_correction and self.mode == "int":
            raise ConfigConflictError("g_correction needs float mode")
        if self.g_correction and self.method == "fast":
            raise ConfigConflictError("g_correction applies to the traditional method only")
        if self.threads is not None and self.threads < 1:
            raise ValidationError("threads must be >= 1")

    def resolved_threads(self) -> int:
        return self.threads or os.cpu_count() or 1

    def resolved_epsilon(self, voxel_size: float) -> float:
        return self.epsilon if self.epsilon is not None else self.epsilon_voxels * voxel_size


@dataclass
class ReconstructionStats:
    method: str = ""
    backend: str = ""
    threads: int = 1
    resolution: tuple = ()
    ellipsoids_emitted: int = 0
    ellipsoids_skipped_zero: int = 0
    ellipsoids_degenerate: int = 0
    triangles_total: int = 0
    saturated_levels: int = 0
    voxel_touches: int = 0
    median_semi_major: float = 0.0
    epsilon: float = 0.0
    level_counts: dict = field(default_factory=dict)
    wall_time: float = 0.0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["resolution"] = list(self.resolution)
        return d


def auto_bounds(ds: TransientDataset) -> tuple[np.ndarray, np.ndarray]:
    """Reconstruction box in front of the wall.

    Takes the wall's bounding box, extrudes it along its thinnest axis (in
    the positive direction) by its largest lateral extent, and grows the
    result by 10%.
    """
    pts = np.vstack([ds.wall.positions, ds.lasers.positions])
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    ext = hi - lo
    depth_axis = int(np.argmin(ext))
    reach = float(ext.max())
    if reach <= 0:
        raise ValidationError("wall sampling is a single point; pass explicit bounds")
    lo, hi = lo.copy(), hi.copy()
    lo[depth_axis] = hi[depth_axis]
    hi[depth_axis] = hi[depth_axis] + reach
    center, half = (lo + hi) / 2, (hi - lo) / 2 * 1.1
    return center - half, center + half


def _grid_for(ds: TransientDataset, cfg: ReconstructionConfig, mode: str) -> VoxelGrid:
    bounds = auto_bounds(ds) if isinstance(cfg.bounds, str) and cfg.bounds == "auto" else cfg.bounds
    return grid_new(bounds, cfg.linear_resolution, mode)


def reconstruct_traditional(ds: TransientDataset, cfg: ReconstructionConfig) -> tuple[VoxelGrid, ReconstructionStats]:
    """Evaluate every voxel centre against every (shot, pixel) histogram."""
    cfg.validate()
    if cfg.method != "traditional":
        raise ConfigConflictError("reconstruct_traditional called with method != 'traditional'")
    grid = _grid_for(ds, cfg, cfg.mode)
    k = _backend.load(cfg.backend)
    threads = cfg.resolved_threads()
    intensity = quantize_weights(ds.intensity) if cfg.mode == "int" else ds.intensity
    start = time.perf_counter()
    acc = k.backproject(
        grid.lo,
        grid.voxel_size,
        grid.resolution,
        ds.lasers.positions,
        ds.lasers.laser_offsets,
        ds.wall.positions,
        ds.wall.camera_offsets,
        np.ascontiguousarray(intensity),
        ds.axis.t0,
        ds.axis.dt,
        ds.axis.c,
        cfg.g_correction,
        threads,
    )
    if cfg.mode == "int":
        if acc.max(initial=0.0) > UINT32_MAX:
            raise IntegerOverflowError("traditional integer accumulation exceeds 32 bits")
        grid.values[...] = acc.astype(np.uint32)
    else:
        grid.values[...] = acc
    stats = ReconstructionStats(
        method="traditional",
        backend=k.NAME,
        threads=threads,
        resolution=grid.resolution,
        wall_time=time.perf_counter() - start,
    )
    return grid, stats


def ellipsoid_table(ds: TransientDataset, cfg: ReconstructionConfig):
    """Enumerate the spheroids a dataset produces.

    Returns ``(params, weights, counts)`` where ``params`` is the tuple from
    :func:`spheroid_params` restricted to emitted spheroids (ordered by shot,
    pixel, bin) and ``counts`` holds the emitted/skipped/degenerate tallies.
    """
    I = ds.intensity
    peak = float(I.max(initial=0.0))
    live = I > cfg.intensity_threshold * peak
    if cfg.mode == "int":
        weights_all = quantize_weights(I, peak)
        live &= weights_all > 0
    s, p, k = np.nonzero(live)
    weights = (weights_all if cfg.mode == "int" else I)[s, p, k]
    t = ds.axis.t0 + k * ds.axis.dt
    d = ds.axis.c * ((t - ds.lasers.laser_offsets[s]) - ds.wall.camera_offsets[p])
    center, rot, a, b, degenerate = spheroid_params(ds.lasers.positions[s], ds.wall.positions[p], d)
    ok = ~degenerate
    counts = {
        "emitted": int(ok.sum()),
        "skipped_zero": int(I.size - len(s)),
        "degenerate": int(degenerate.sum()),
    }
    return (center[ok], rot[ok], a[ok], b[ok]), weights[ok], counts


def reconstruct_fast(ds: TransientDataset, cfg: ReconstructionConfig, atlas=None) -> tuple[VoxelGrid, ReconstructionStats]:
    """Voxelize one spheroid per non-zero (shot, pixel, bin) sample."""
    cfg.validate()
    if cfg.method != "fast":
        raise ConfigConflictError("reconstruct_fast called with method != 'fast'")
    grid = _grid_for(ds, cfg, cfg.mode)
    atlas = atlas or build_sphere_atlas(cfg.max_tess_level)
    threads = cfg.resolved_threads()
    eps = cfg.resolved_epsilon(grid.voxel_size)
    k = _backend.load(cfg.backend)

    start = time.perf_counter()
    (center, rot, a, b), weights, counts = ellipsoid_table(ds, cfg)
    splat = splat_batch(grid, center, rot, a, b, weights, atlas, eps, dedup=cfg.dedup, threads=threads, backend=cfg.backend)
    levels, level_n = np.unique(splat.levels, return_counts=True)
    stats = ReconstructionStats(
        method="fast",
        backend=k.NAME,
        threads=threads,
        resolution=grid.resolution,
        ellipsoids_emitted=counts["emitted"],
        ellipsoids_skipped_zero=counts["skipped_zero"],
        ellipsoids_degenerate=counts["degenerate"],
        triangles_total=splat.triangles,
        saturated_levels=splat.saturated,
        voxel_touches=splat.touches,
        median_semi_major=float(np.median(a)) if len(a) else 0.0,
        epsilon=eps,
        level_counts={int(lv): int(n) for lv, n in zip(levels, level_n)},
        wall_time=time.perf_counter() - start,
    )
    return grid, stats


def reconstruct(ds: TransientDataset, cfg: ReconstructionConfig, atlas=None) -> tuple[VoxelGrid, ReconstructionStats]:
    if cfg.method == "traditional":
        return reconstruct_traditional(ds, cfg)
    return reconstruct_fast(ds, cfg, atlas)


def reconstruct_pipeline(ds: TransientDataset, cfg: ReconstructionConfig, filter: bool = False) -> VoxelGrid:
    """Run the configured method and return a max-normalized float grid,
    Laplacian-filtered when ``filter`` is set."""
    grid, _ = reconstruct(ds, cfg)
    if filter:
        return laplacian_filter(grid)
    return grid.like("float", grid.normalized())

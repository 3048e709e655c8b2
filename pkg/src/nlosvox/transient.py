"""Time-resolved signal model and three-bounce forward simulator.

Units are SI throughout: meters, seconds, meters/second.  Times recorded by
the sensor include the laser-to-wall flight ``t_s`` and the wall-to-camera
flight ``t_p``; both are stored per shot and per pixel so reconstruction can
subtract them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateDistanceError, ValidationError

SPEED_OF_LIGHT = 299_792_458.0
#: Minimum separation between path vertices before the inverse-square term blows up.
EPS_DIST = 1e-6


def _points(a, name: str, n: int | None = None) -> np.ndarray:
    arr = np.array(a, dtype=np.float64, copy=True).reshape(-1, 3) if np.size(a) else np.zeros((0, 3))
    if n is not None and arr.shape[0] != n:
        raise ValidationError(f"{name}: expected {n} points, got {arr.shape[0]}")
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"{name}: non-finite coordinates")
    arr.flags.writeable = False
    return arr


def _offsets(a, name: str, n: int) -> np.ndarray:
    arr = np.array(a, dtype=np.float64, copy=True).reshape(-1)
    if arr.shape[0] != n:
        raise ValidationError(f"{name}: expected {n} entries, got {arr.shape[0]}")
    if not np.all(np.isfinite(arr)) or np.any(arr < 0):
        raise ValidationError(f"{name}: offsets must be finite and >= 0")
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class TemporalAxis:
    """Uniform time binning: bin ``k`` is centred on ``t0 + k*dt``."""

    t0: float
    dt: float
    bins: int
    c: float = SPEED_OF_LIGHT

    def __post_init__(self):
        if not (self.dt > 0 and math.isfinite(self.dt)):
            raise ValidationError(f"dt must be positive, got {self.dt}")
        if int(self.bins) != self.bins or self.bins < 1:
            raise ValidationError(f"bins must be a positive integer, got {self.bins}")
        if not (self.c > 0 and math.isfinite(self.c)):
            raise ValidationError(f"c must be positive, got {self.c}")
        if not math.isfinite(self.t0):
            raise ValidationError("t0 must be finite")
        object.__setattr__(self, "bins", int(self.bins))

    @property
    def t_end(self) -> float:
        return self.t0 + self.bins * self.dt

    def bin_to_time(self, k):
        return self.t0 + np.asarray(k) * self.dt if np.ndim(k) else self.t0 + k * self.dt

    def bin_indices(self, t) -> np.ndarray:
        """Vectorised :func:`time_to_bin`; out-of-range entries are -1."""
        v = np.floor((np.asarray(t, dtype=np.float64) - self.t0) / self.dt + 0.5)
        ok = (v >= 0) & (v < self.bins)
        return np.where(ok, v, -1).astype(np.int64)


@dataclass(frozen=True)
class WallSampling:
    """Visible wall points imaged by each sensor pixel, plus camera flight times."""

    positions: np.ndarray
    camera_offsets: np.ndarray

    def __post_init__(self):
        pos = _points(self.positions, "wall positions")
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "camera_offsets", _offsets(self.camera_offsets, "camera_offsets", len(pos)))

    @property
    def pixels(self) -> int:
        return self.positions.shape[0]


@dataclass(frozen=True)
class LaserSampling:
    """Virtual point lights on the wall plus laser flight times."""

    positions: np.ndarray
    laser_offsets: np.ndarray

    def __post_init__(self):
        pos = _points(self.positions, "laser positions")
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "laser_offsets", _offsets(self.laser_offsets, "laser_offsets", len(pos)))

    @property
    def shots(self) -> int:
        return self.positions.shape[0]


@dataclass(frozen=True)
class TransientDataset:
    """Space-time measurement ``intensity[shot, pixel, bin]``."""

    axis: TemporalAxis
    wall: WallSampling
    lasers: LaserSampling
    intensity: np.ndarray

    def __post_init__(self):
        data = np.array(self.intensity, dtype=np.float64, copy=True)
        shape = (self.lasers.shots, self.wall.pixels, self.axis.bins)
        if data.shape != shape:
            raise ValidationError(f"intensity shape {data.shape} != (S, P, T) = {shape}")
        if not np.all(np.isfinite(data)) or np.any(data < 0):
            raise ValidationError("intensities must be finite and >= 0")
        data.flags.writeable = False
        object.__setattr__(self, "intensity", data)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.intensity.shape

    def nonzero_fraction(self) -> float:
        return float(np.count_nonzero(self.intensity)) / self.intensity.size

    def with_intensity(self, intensity) -> "TransientDataset":
        return TransientDataset(self.axis, self.wall, self.lasers, intensity)

    def permute_shots(self, order) -> "TransientDataset":
        order = np.asarray(order)
        lasers = LaserSampling(self.lasers.positions[order], self.lasers.laser_offsets[order])
        return TransientDataset(self.axis, self.wall, lasers, self.intensity[order])

    def select_pixels(self, keep) -> "TransientDataset":
        keep = np.asarray(keep)
        wall = WallSampling(self.wall.positions[keep], self.wall.camera_offsets[keep])
        return TransientDataset(self.axis, wall, self.lasers, self.intensity[:, keep])


# -- scene description --------------------------------------------------------


@dataclass(frozen=True)
class WallGrid:
    """Rectangle ``origin + u*edge_u + v*edge_v`` sampled at cell centres.

    Pixel ``p = j*nu + i`` sits at ``u = (i+0.5)/nu``, ``v = (j+0.5)/nv``.
    """

    origin: tuple
    edge_u: tuple
    edge_v: tuple
    nu: int
    nv: int

    def __post_init__(self):
        if self.nu < 1 or self.nv < 1:
            raise ValidationError("wall pixel counts must be >= 1")
        area = np.linalg.norm(np.cross(self.edge_u, self.edge_v))
        if not area > 0:
            raise ValidationError("wall rectangle has zero area")

    def positions(self) -> np.ndarray:
        u = (np.arange(self.nu) + 0.5) / self.nu
        v = (np.arange(self.nv) + 0.5) / self.nv
        vv, uu = np.meshgrid(v, u, indexing="ij")
        o, eu, ev = (np.asarray(x, dtype=np.float64) for x in (self.origin, self.edge_u, self.edge_v))
        return o + uu.reshape(-1, 1) * eu + vv.reshape(-1, 1) * ev


@dataclass(frozen=True)
class SurfaceSamples:
    """Oriented, weighted point samples of the hidden geometry."""

    positions: np.ndarray
    normals: np.ndarray
    areas: np.ndarray
    albedos: np.ndarray

    def __post_init__(self):
        pos = _points(self.positions, "hidden positions")
        n = len(pos)
        nrm = _points(self.normals, "hidden normals", n)
        if n and np.max(np.abs(np.linalg.norm(nrm, axis=1) - 1.0)) > 1e-9:
            raise ValidationError("hidden surface normals must have unit length")
        areas = np.array(self.areas, dtype=np.float64).reshape(-1)
        albedos = np.array(self.albedos, dtype=np.float64).reshape(-1)
        if areas.shape != (n,) or albedos.shape != (n,):
            raise ValidationError("areas/albedos must have one entry per sample")
        if np.any(~(areas > 0)):
            raise ValidationError("every sample area must be > 0")
        if np.any(~((albedos >= 0) & (albedos <= 1))):
            raise ValidationError("albedo must lie in [0, 1]")
        for name, arr in (("normals", nrm), ("areas", areas), ("albedos", albedos)):
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "positions", pos)

    def __len__(self):
        return self.positions.shape[0]

    @classmethod
    def empty(cls) -> "SurfaceSamples":
        return cls(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros(0), np.zeros(0))

    @classmethod
    def concat(cls, parts) -> "SurfaceSamples":
        parts = [p for p in parts if len(p)]
        if not parts:
            return cls.empty()
        return cls(*(np.concatenate([getattr(p, f) for p in parts]) for f in ("positions", "normals", "areas", "albedos")))

    def subset(self, idx) -> "SurfaceSamples":
        return SurfaceSamples(self.positions[idx], self.normals[idx], self.areas[idx], self.albedos[idx])

    def scaled_albedo(self, k: float) -> "SurfaceSamples":
        return SurfaceSamples(self.positions, self.normals, self.areas, self.albedos * k)


def rectangle_samples(origin, edge_u, edge_v, *, density=None, counts=None, albedo=1.0, flip=False) -> SurfaceSamples:
    """Sample a rectangle on a regular grid of cell centres.

    Either ``density`` (samples per m^2, split along each edge by its length)
    or explicit ``counts = (nu, nv)`` must be given.  The normal is
    ``edge_u x edge_v`` normalised, negated when ``flip`` is set.
    """
    o, eu, ev = (np.asarray(x, dtype=np.float64) for x in (origin, edge_u, edge_v))
    cross = np.cross(eu, ev)
    area = float(np.linalg.norm(cross))
    if not area > 0:
        raise ValidationError("rectangle has zero area")
    if counts is None:
        if density is None or not density > 0:
            raise ValidationError("rectangle needs a positive density or explicit counts")
        root = math.sqrt(density)
        counts = (max(1, round(np.linalg.norm(eu) * root)), max(1, round(np.linalg.norm(ev) * root)))
    nu, nv = (int(c) for c in counts)
    if nu < 1 or nv < 1:
        raise ValidationError("rectangle sample counts must be >= 1")
    pos = WallGrid(tuple(o), tuple(eu), tuple(ev), nu, nv).positions()
    normal = cross / area * (-1.0 if flip else 1.0)
    n = nu * nv
    return SurfaceSamples(pos, np.tile(normal, (n, 1)), np.full(n, area / n), np.full(n, float(albedo)))


@dataclass(frozen=True)
class TimeSpec:
    """Temporal block of a scene; ``t0``/``bins`` of None are fitted to the geometry."""

    dt: float
    c: float = SPEED_OF_LIGHT
    t0: float | None = None
    bins: int | None = None


@dataclass(frozen=True)
class HiddenScene:
    wall_grid: WallGrid
    laser_points: np.ndarray
    laser_origin: tuple
    camera_origin: tuple
    hidden: SurfaceSamples
    time: TimeSpec = field(default_factory=lambda: TimeSpec(dt=1e-11))

    def __post_init__(self):
        pts = _points(self.laser_points, "laser points")
        if len(pts) == 0:
            raise ValidationError("scene needs at least one laser point")
        object.__setattr__(self, "laser_points", pts)

    def wall_sampling(self) -> WallSampling:
        pos = self.wall_grid.positions()
        cam = np.asarray(self.camera_origin, dtype=np.float64)
        return WallSampling(pos, np.linalg.norm(pos - cam, axis=1) / self.time.c)

    def laser_sampling(self) -> LaserSampling:
        src = np.asarray(self.laser_origin, dtype=np.float64)
        return LaserSampling(self.laser_points, np.linalg.norm(self.laser_points - src, axis=1) / self.time.c)

    def axis(self) -> TemporalAxis:
        return fit_axis(self)


# -- scalar path helpers ------------------------------------------------------


def path_time(a, b, c: float) -> float:
    """Flight time of a straight segment."""
    d = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    return math.sqrt(float(d[0] * d[0] + d[1] * d[1] + d[2] * d[2])) / c


def three_bounce_time(l, x, p, c: float) -> float:
    return path_time(l, x, c) + path_time(x, p, c)


def time_to_bin(axis: TemporalAxis, t: float) -> int | None:
    """Nearest bin (ties round up), or None outside ``[0, bins)``."""
    k = math.floor((t - axis.t0) / axis.dt + 0.5)
    return k if 0 <= k < axis.bins else None


def bin_to_time(axis: TemporalAxis, k: int) -> float:
    return axis.t0 + k * axis.dt


def geometric_attenuation(l, x, p) -> float:
    """Inverse-square falloff of the path ``l -> x -> p`` (no cosines)."""
    dl = path_time(l, x, 1.0)
    dp = path_time(x, p, 1.0)
    if dl < EPS_DIST or dp < EPS_DIST:
        raise DegenerateDistanceError(f"path vertex within {EPS_DIST} m of a wall point (|l-x|={dl}, |x-p|={dp})")
    return 1.0 / (dl * dl * (dp * dp))


# -- forward model ------------------------------------------------------------


def _three_bounce_times(scene_lasers: LaserSampling, wall: WallSampling, x: np.ndarray, c: float):
    """Yield per-shot (shot index, |l-x|, |x-p| matrix, recorded times)."""
    dp = np.linalg.norm(wall.positions[:, None, :] - x[None, :, :], axis=2)  # (P, N)
    for s in range(scene_lasers.shots):
        dl = np.linalg.norm(x - scene_lasers.positions[s], axis=1)  # (N,)
        t = ((scene_lasers.laser_offsets[s] + dl / c) + dp / c) + wall.camera_offsets[:, None]
        yield s, dl, dp, t


def fit_axis(scene: HiddenScene) -> TemporalAxis:
    """Resolve the scene's temporal block, fitting ``t0``/``bins`` when absent.

    The fitted axis spans every three-bounce arrival time with one empty bin
    of margin on each side.
    """
    spec = scene.time
    if spec.t0 is not None and spec.bins is not None:
        return TemporalAxis(spec.t0, spec.dt, spec.bins, spec.c)
    x = scene.hidden.positions
    if len(x) == 0:
        raise ValidationError("cannot fit a time axis to a scene without hidden samples")
    lo, hi = math.inf, -math.inf
    for _, _, _, t in _three_bounce_times(scene.laser_sampling(), scene.wall_sampling(), x, spec.c):
        lo, hi = min(lo, float(t.min())), max(hi, float(t.max()))
    t0 = spec.t0 if spec.t0 is not None else lo - spec.dt
    bins = spec.bins
    if bins is None:
        bins = max(1, math.floor((hi - t0) / spec.dt + 0.5) + 2)
    return TemporalAxis(t0, spec.dt, bins, spec.c)


def simulate_dataset(scene: HiddenScene, *, noise_photons: float | None = None, seed=None) -> TransientDataset:
    """Render third-bounce transients of a Lambertian hidden scene.

    Visibility between hidden samples is ignored. Each (shot, pixel, sample)
    triple deposits ``albedo/pi * cos_in * cos_out * G * area`` into the
    nearest time bin; arrivals outside the axis are dropped.

    With ``noise_photons`` set, every bin is Poisson-resampled so that the
    brightest bin has that expected photon count.
    """
    axis = fit_axis(scene)
    wall = scene.wall_sampling()
    lasers = scene.laser_sampling()
    S, P, T = lasers.shots, wall.pixels, axis.bins
    out = np.zeros((S, P, T))
    hid = scene.hidden
    if len(hid):
        x, nrm = hid.positions, hid.normals
        base = hid.albedos / math.pi
        to_p = wall.positions[:, None, :] - x[None, :, :]  # (P, N, 3)
        for s, dl, dp, t in _three_bounce_times(lasers, wall, x, axis.c):
            if dl.min() < EPS_DIST or dp.min() < EPS_DIST:
                raise DegenerateDistanceError("a hidden sample coincides with a wall or laser point")
            cos_in = np.clip(np.einsum("ij,ij->i", nrm, lasers.positions[s] - x) / dl, 0.0, 1.0)
            cos_out = np.clip(np.einsum("pij,ij->pi", to_p, nrm) / dp, 0.0, 1.0)
            g = 1.0 / (dl * dl * (dp * dp))
            w = base * cos_in * cos_out * g * hid.areas
            k = axis.bin_indices(t)
            ok = k >= 0
            flat = (np.arange(P)[:, None] * T + k)[ok]
            out[s] = np.bincount(flat, weights=w[ok], minlength=P * T).reshape(P, T)
    if noise_photons is not None:
        out = poisson_resample(out, noise_photons, seed)
    return TransientDataset(axis, wall, lasers, out)


def poisson_resample(intensity: np.ndarray, photons: float, seed=None) -> np.ndarray:
    if not photons > 0:
        raise ValidationError("photon count must be positive")
    peak = float(intensity.max(initial=0.0))
    if peak == 0.0:
        return intensity.copy()
    rng = np.random.default_rng(seed)
    scale = photons / peak
    return rng.poisson(intensity * scale).astype(np.float64) / scale

"""On-disk formats: datasets, scenes, volumes and exports.

Binary layouts (all little-endian)::

    dataset  "NLTD" u16 version, u32 S, u32 P, u32 T, f64 c, f64 t0, f64 dt,
             f64[S,3] laser positions, f64[S] laser offsets,
             f64[P,3] wall positions,  f64[P] camera offsets,
             f32[S,P,T] intensity (shot-major, then pixel, then bin)

    volume   "NLVG" u16 version, u32[3] resolution, f64[3] min, f64[3] max,
             u8 mode (0 = uint32 counts, 1 = float64), payload with x fastest

Scenes are TOML documents; see :func:`read_scene` for the schema.
"""

from __future__ import annotations

import json
import math
import re
import struct
import sys
from pathlib import Path

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover - exercised on 3.10 only
    import tomli as tomllib

from .errors import (
    FormatError,
    MalformedMagicError,
    NegativeIntensityError,
    SceneParseError,
    SceneSemanticError,
    TruncatedPayloadError,
    UnsupportedVersionError,
    ValidationError,
)
from .transient import (
    SPEED_OF_LIGHT,
    HiddenScene,
    LaserSampling,
    SurfaceSamples,
    TemporalAxis,
    TimeSpec,
    TransientDataset,
    WallGrid,
    WallSampling,
    rectangle_samples,
)
from .voxelizer import VoxelGrid

DATASET_MAGIC = b"NLTD"
VOLUME_MAGIC = b"NLVG"
FORMAT_VERSION = 1

_DS_HEADER = struct.Struct("<4sHIII3d")
_VOL_HEADER = struct.Struct("<4sH3I6dB")
_MODE_TAGS = {"int": 0, "float": 1}


# -- helpers ------------------------------------------------------------------


def _read_bytes(path) -> bytes:
    return Path(path).read_bytes()


def _write_bytes(path, chunks) -> None:
    with open(path, "wb") as fh:
        for chunk in chunks:
            fh.write(chunk)


def _check_magic(buf: bytes, magic: bytes, header: struct.Struct, path) -> tuple:
    if len(buf) < 4 or buf[:4] != magic:
        raise MalformedMagicError(f"expected magic {magic!r}, found {bytes(buf[:4])!r}", 0, path)
    if len(buf) < 6:
        raise TruncatedPayloadError("file ends inside the version field", len(buf), path)
    (version,) = struct.unpack_from("<H", buf, 4)
    if version != FORMAT_VERSION:
        raise UnsupportedVersionError(f"version {version} is not supported (expected {FORMAT_VERSION})", 4, path)
    if len(buf) < header.size:
        raise TruncatedPayloadError(f"header needs {header.size} bytes, file has {len(buf)}", len(buf), path)
    return header.unpack_from(buf, 0)


class _Cursor:
    """Sequential typed reads over a byte buffer with offset-aware errors."""

    def __init__(self, buf: bytes, offset: int, path):
        self.buf = buf
        self.offset = offset
        self.path = path

    def take(self, dtype: str, count: int, what: str) -> tuple[np.ndarray, int]:
        start = self.offset
        nbytes = np.dtype(dtype).itemsize * count
        if start + nbytes > len(self.buf):
            raise TruncatedPayloadError(
                f"{what}: need {nbytes} bytes, {len(self.buf) - start} remain", start, self.path
            )
        arr = np.frombuffer(self.buf, dtype=dtype, count=count, offset=start)
        self.offset += nbytes
        return arr, start

    def finish(self) -> None:
        if self.offset != len(self.buf):
            raise FormatError(f"{len(self.buf) - self.offset} unexpected trailing bytes", self.offset, self.path)


# -- datasets -----------------------------------------------------------------


def dataset_bytes(ds: TransientDataset) -> bytes:
    """Serialized form of ``ds``; intensities are stored as float32."""
    S, P, T = ds.shape
    intensity = ds.intensity.astype("<f4")
    if np.any(intensity < 0) or not np.all(np.isfinite(intensity)):
        raise ValidationError("intensities must be finite and >= 0 to be stored")
    head = _DS_HEADER.pack(DATASET_MAGIC, FORMAT_VERSION, S, P, T, ds.axis.c, ds.axis.t0, ds.axis.dt)
    parts = [
        head,
        ds.lasers.positions.astype("<f8").tobytes(),
        ds.lasers.laser_offsets.astype("<f8").tobytes(),
        ds.wall.positions.astype("<f8").tobytes(),
        ds.wall.camera_offsets.astype("<f8").tobytes(),
        intensity.tobytes(),
    ]
    return b"".join(parts)


def write_dataset(ds: TransientDataset, path) -> None:
    _write_bytes(path, [dataset_bytes(ds)])


def parse_dataset(buf: bytes, path=None) -> TransientDataset:
    _, _, S, P, T, c, t0, dt = _check_magic(buf, DATASET_MAGIC, _DS_HEADER, path)
    if min(S, P, T) < 1:
        raise FormatError(f"counts must be positive, got S={S} P={P} T={T}", 6, path)
    need = _DS_HEADER.size + 8 * (4 * S + 4 * P) + 4 * S * P * T
    if len(buf) < need:
        raise TruncatedPayloadError(f"file has {len(buf)} bytes, header implies {need}", len(buf), path)
    cur = _Cursor(buf, _DS_HEADER.size, path)
    lasers, _ = cur.take("<f8", 3 * S, "laser positions")
    loff, _ = cur.take("<f8", S, "laser offsets")
    wall, _ = cur.take("<f8", 3 * P, "wall positions")
    poff, _ = cur.take("<f8", P, "camera offsets")
    raw, start = cur.take("<f4", S * P * T, "intensity")
    cur.finish()
    bad = np.flatnonzero(~(raw >= 0))
    if len(bad):
        raise NegativeIntensityError(
            f"intensity {raw[bad[0]]} at sample {int(bad[0])} is negative or not a number",
            start + 4 * int(bad[0]),
            path,
        )
    try:
        return TransientDataset(
            axis=TemporalAxis(t0, dt, T, c),
            wall=WallSampling(wall.reshape(P, 3), poff),
            lasers=LaserSampling(lasers.reshape(S, 3), loff),
            intensity=raw.astype(np.float64).reshape(S, P, T),
        )
    except ValidationError as exc:
        raise FormatError(f"invalid dataset contents: {exc}", None, path) from exc


def read_dataset(path) -> TransientDataset:
    return parse_dataset(_read_bytes(path), path)


# -- volumes ------------------------------------------------------------------


def volume_bytes(grid: VoxelGrid) -> bytes:
    dtype = "<u4" if grid.mode == "int" else "<f8"
    head = _VOL_HEADER.pack(
        VOLUME_MAGIC, FORMAT_VERSION, *grid.resolution, *grid.lo.tolist(), *grid.hi.tolist(), _MODE_TAGS[grid.mode]
    )
    # x fastest: Fortran order of the (x, y, z) array
    return head + grid.values.astype(dtype).ravel(order="F").tobytes()


def write_volume(grid: VoxelGrid, path) -> None:
    _write_bytes(path, [volume_bytes(grid)])


def parse_volume(buf: bytes, path=None) -> VoxelGrid:
    fields = _check_magic(buf, VOLUME_MAGIC, _VOL_HEADER, path)
    res = tuple(int(r) for r in fields[2:5])
    lo = np.array(fields[5:8], dtype=np.float64)
    hi = np.array(fields[8:11], dtype=np.float64)
    tag = fields[11]
    modes = {v: k for k, v in _MODE_TAGS.items()}
    if tag not in modes:
        raise FormatError(f"unknown mode tag {tag}", _VOL_HEADER.size - 1, path)
    if min(res) < 1:
        raise FormatError(f"resolution must be positive, got {res}", 6, path)
    if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi)) and np.all(hi > lo)):
        raise FormatError("bounds must be finite with min < max", 18, path)
    mode = modes[tag]
    n = res[0] * res[1] * res[2]
    cur = _Cursor(buf, _VOL_HEADER.size, path)
    raw, _ = cur.take("<u4" if mode == "int" else "<f8", n, "voxel payload")
    cur.finish()
    values = raw.reshape(res, order="F").astype(np.uint32 if mode == "int" else np.float64, order="C")
    return VoxelGrid.from_box(lo, hi, res, mode, values)


def read_volume(path) -> VoxelGrid:
    return parse_volume(_read_bytes(path), path)


# -- scenes -------------------------------------------------------------------

_LINE_RE = re.compile(r"line (\d+)")


def _field_line(text: str, key: str) -> int | None:
    """Best-effort line of the first assignment or table header naming ``key``."""
    leaf = key.split(".")[-1]
    pat = re.compile(rf"^\s*(\[+\s*[\w.]*\b{re.escape(leaf)}\b[\w.]*\s*\]+|{re.escape(leaf)}\s*=)")
    for i, line in enumerate(text.splitlines(), start=1):
        if pat.search(line):
            return i
    return None


class _SceneReader:
    def __init__(self, text: str):
        self.text = text

    def fail(self, key: str, message: str):
        raise SceneSemanticError(message, _field_line(self.text, key), key)

    def get(self, table: dict, key: str, prefix: str, default=...):
        if key not in table:
            if default is ...:
                self.fail(f"{prefix}{key}", "required field is missing")
            return default
        return table[key]

    def vec3(self, table: dict, key: str, prefix: str, default=...):
        v = self.get(table, key, prefix, default)
        try:
            arr = np.asarray(v, dtype=np.float64)
        except (TypeError, ValueError):
            arr = None
        if arr is None or arr.shape != (3,) or not np.all(np.isfinite(arr)):
            self.fail(f"{prefix}{key}", f"expected three finite numbers, got {v!r}")
        return arr

    def points(self, v, key: str) -> np.ndarray:
        try:
            arr = np.asarray(v, dtype=np.float64)
        except (TypeError, ValueError):
            arr = None
        if arr is None or arr.ndim != 2 or arr.shape[1] != 3 or not np.all(np.isfinite(arr)):
            self.fail(key, "expected a list of [x, y, z] points")
        return arr

    def count_pair(self, table: dict, key: str, prefix: str) -> tuple[int, int]:
        v = self.get(table, key, prefix)
        if not (isinstance(v, list) and len(v) == 2 and all(isinstance(x, int) and x >= 1 for x in v)):
            self.fail(f"{prefix}{key}", f"expected two positive integers, got {v!r}")
        return int(v[0]), int(v[1])

    def number(self, table: dict, key: str, prefix: str, default=..., positive=False):
        v = self.get(table, key, prefix, default)
        if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
            self.fail(f"{prefix}{key}", f"expected a number, got {v!r}")
        if positive and not v > 0:
            self.fail(f"{prefix}{key}", f"must be positive, got {v!r}")
        return float(v)

    def table(self, doc: dict, key: str, prefix: str = "", required=True) -> dict:
        v = doc.get(key)
        if v is None:
            if required:
                self.fail(f"{prefix}{key}", "required table is missing")
            return {}
        if not isinstance(v, dict):
            self.fail(f"{prefix}{key}", "expected a table")
        return v

    def rectangle(self, t: dict, prefix: str):
        o = self.vec3(t, "origin", prefix)
        u = self.vec3(t, "edge_u", prefix)
        v = self.vec3(t, "edge_v", prefix)
        if not np.linalg.norm(np.cross(u, v)) > 0:
            self.fail(f"{prefix}edge_u", "rectangle has zero area")
        return o, u, v


def parse_scene(text: str) -> HiddenScene:
    """Build a :class:`HiddenScene` from TOML text.

    Schema (lengths in meters, times in seconds)::

        laser_origin  = [x, y, z]
        camera_origin = [x, y, z]

        [wall]                     # imaged rectangle
        origin = [...]; edge_u = [...]; edge_v = [...]
        pixels = [nu, nv]

        [lasers]                   # either explicit points ...
        points = [[x, y, z], ...]
        [lasers.grid]              # ... or a rectangle sampled at cell centres
        origin = [...]; edge_u = [...]; edge_v = [...]; counts = [nu, nv]

        [time]
        dt = 1.25e-10
        t0 = "auto"                # or a number
        bins = "auto"              # or an integer
        c = 299792458.0            # optional

        [[hidden.rectangles]]      # sampled at `density` per m^2 or `counts`
        origin = [...]; edge_u = [...]; edge_v = [...]
        density = 400.0            # or counts = [nu, nv]
        albedo = 1.0               # optional
        flip = false               # optional, reverses the normal

        [[hidden.samples]]         # explicit oriented samples
        positions = [[...], ...]; normals = [[...], ...]
        areas = [...]; albedos = [...]
    """
    try:
        doc = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        m = _LINE_RE.search(str(exc))
        raise SceneParseError(str(exc), int(m.group(1)) if m else None) from None

    r = _SceneReader(text)
    wall_t = r.table(doc, "wall")
    o, u, v = r.rectangle(wall_t, "wall.")
    nu, nv = r.count_pair(wall_t, "pixels", "wall.")
    wall = WallGrid(tuple(o), tuple(u), tuple(v), nu, nv)

    lasers_t = r.table(doc, "lasers")
    if "points" in lasers_t and "grid" in lasers_t:
        r.fail("lasers", "give either 'points' or 'grid', not both")
    if "grid" in lasers_t:
        g = r.table(lasers_t, "grid", "lasers.")
        go, gu, gv = r.rectangle(g, "lasers.grid.")
        gn = r.count_pair(g, "counts", "lasers.grid.")
        laser_points = WallGrid(tuple(go), tuple(gu), tuple(gv), *gn).positions()
    else:
        raw = r.get(lasers_t, "points", "lasers.")
        if isinstance(raw, list) and len(raw) == 0:
            r.fail("lasers.points", "at least one laser point is required")
        laser_points = r.points(raw, "lasers.points")

    laser_origin = r.vec3(doc, "laser_origin", "")
    camera_origin = r.vec3(doc, "camera_origin", "")

    time_t = r.table(doc, "time")
    dt = r.number(time_t, "dt", "time.", positive=True)
    c = r.number(time_t, "c", "time.", SPEED_OF_LIGHT, positive=True)
    t0 = time_t.get("t0", "auto")
    if t0 != "auto":
        t0 = r.number(time_t, "t0", "time.")
    else:
        t0 = None
    bins = time_t.get("bins", "auto")
    if bins == "auto":
        bins = None
    elif isinstance(bins, bool) or not isinstance(bins, int) or bins < 1:
        r.fail("time.bins", f"expected a positive integer or \"auto\", got {bins!r}")

    hidden_t = r.table(doc, "hidden", required=False)
    parts = []
    rects = hidden_t.get("rectangles", [])
    if not isinstance(rects, list):
        r.fail("hidden.rectangles", "expected an array of tables")
    for i, rect in enumerate(rects):
        prefix = f"hidden.rectangles[{i}]."
        if not isinstance(rect, dict):
            r.fail(prefix[:-1], "expected a table")
        ro, ru, rv = r.rectangle(rect, prefix)
        albedo = r.number(rect, "albedo", prefix, 1.0)
        if not 0 <= albedo <= 1:
            r.fail(f"{prefix}albedo", "albedo must lie in [0, 1]")
        flip = rect.get("flip", False)
        if not isinstance(flip, bool):
            r.fail(f"{prefix}flip", "expected true or false")
        if ("density" in rect) == ("counts" in rect):
            r.fail(f"{prefix}density", "give exactly one of 'density' or 'counts'")
        if "density" in rect:
            density = r.number(rect, "density", prefix, positive=True)
            parts.append(rectangle_samples(ro, ru, rv, density=density, albedo=albedo, flip=flip))
        else:
            counts = r.count_pair(rect, "counts", prefix)
            parts.append(rectangle_samples(ro, ru, rv, counts=counts, albedo=albedo, flip=flip))
    samples = hidden_t.get("samples", [])
    if not isinstance(samples, list):
        r.fail("hidden.samples", "expected an array of tables")
    for i, block in enumerate(samples):
        prefix = f"hidden.samples[{i}]."
        if not isinstance(block, dict):
            r.fail(prefix[:-1], "expected a table")
        pos = r.points(r.get(block, "positions", prefix), f"{prefix}positions")
        nrm = r.points(r.get(block, "normals", prefix), f"{prefix}normals")
        n = len(pos)
        areas = block.get("areas", [1.0 / max(n, 1)] * n)
        albedos = block.get("albedos", [1.0] * n)
        lengths = np.linalg.norm(nrm, axis=1) if len(nrm) else np.zeros(0)
        if len(nrm) != n or np.any(lengths == 0):
            r.fail(f"{prefix}normals", "need one non-zero normal per position")
        try:
            parts.append(SurfaceSamples(pos, nrm / lengths[:, None], areas, albedos))
        except ValidationError as exc:
            r.fail(prefix[:-1], str(exc))

    try:
        return HiddenScene(
            wall_grid=wall,
            laser_points=laser_points,
            laser_origin=tuple(laser_origin),
            camera_origin=tuple(camera_origin),
            hidden=SurfaceSamples.concat(parts),
            time=TimeSpec(dt=dt, c=c, t0=t0, bins=bins),
        )
    except ValidationError as exc:
        raise SceneSemanticError(str(exc)) from exc


def read_scene(path) -> HiddenScene:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except UnicodeDecodeError as exc:
        raise SceneParseError(f"{path}: not UTF-8 text ({exc.reason})") from None
    return parse_scene(text)


# -- exports ------------------------------------------------------------------


def _check_threshold(threshold: float) -> None:
    if not 0.0 <= threshold <= 1.0:
        raise ValidationError(f"threshold must lie in [0, 1], got {threshold}")


def point_cloud(grid: VoxelGrid, threshold: float) -> tuple[np.ndarray, np.ndarray]:
    """Centres and values of voxels with ``value >= threshold * max``.

    An all-zero grid yields no points at any threshold.
    """
    _check_threshold(threshold)
    v = grid.values.astype(np.float64)
    peak = v.max(initial=0.0)
    if not peak > 0:
        return np.zeros((0, 3)), np.zeros(0)
    mask = v >= threshold * peak
    idx = np.argwhere(mask)
    centers = grid.lo + (idx + 0.5) * grid.voxel_size
    return centers, v[mask]


def export_ply(grid: VoxelGrid, path, threshold: float = 0.3, binary: bool = False) -> int:
    """Write voxel centres above the threshold as a PLY point cloud.

    Each vertex carries ``x y z confidence`` as float64.  Returns the vertex count.
    """
    pts, conf = point_cloud(grid, threshold)
    n = len(pts)
    fmt = "binary_little_endian" if binary else "ascii"
    header = (
        "ply\n"
        f"format {fmt} 1.0\n"
        "comment nlosvox confidence volume\n"
        f"element vertex {n}\n"
        "property double x\n"
        "property double y\n"
        "property double z\n"
        "property double confidence\n"
        "end_header\n"
    ).encode("ascii")
    table = np.column_stack([pts, conf]) if n else np.zeros((0, 4))
    if binary:
        body = table.astype("<f8").tobytes()
    else:
        body = "".join(f"{x!r} {y!r} {z!r} {c!r}\n" for x, y, z, c in table.tolist()).encode("ascii")
    _write_bytes(path, [header, body])
    return n


def read_ply(path) -> np.ndarray:
    """Vertex table (N, 4) of a PLY file written by :func:`export_ply`."""
    buf = _read_bytes(path)
    end = buf.find(b"end_header\n")
    if not buf.startswith(b"ply\n") or end < 0:
        raise MalformedMagicError("not a PLY file", 0, path)
    header = buf[:end].decode("ascii").splitlines()
    n = next(int(line.split()[2]) for line in header if line.startswith("element vertex"))
    body = buf[end + len(b"end_header\n"):]
    if any("binary_little_endian" in line for line in header):
        if len(body) != 32 * n:
            raise TruncatedPayloadError(f"expected {32 * n} payload bytes, found {len(body)}", end, path)
        return np.frombuffer(body, dtype="<f8").reshape(n, 4).copy()
    rows = body.decode("ascii").split()
    if len(rows) != 4 * n:
        raise TruncatedPayloadError(f"expected {n} vertices", end, path)
    return np.array(rows, dtype=np.float64).reshape(n, 4)


def slice_images(grid: VoxelGrid, axis: int = 2) -> np.ndarray:
    """8-bit layers along ``axis``, normalized by the global maximum."""
    if axis not in (0, 1, 2):
        raise ValidationError(f"axis must be 0, 1 or 2, got {axis}")
    v = grid.normalized()
    img = np.floor(255.0 * v + 0.5).astype(np.uint8)
    return np.moveaxis(img, axis, 0)


def export_slices(grid: VoxelGrid, directory, axis: int = 2, prefix: str = "slice") -> list[Path]:
    """Write one binary PGM (P5) per layer along ``axis``.

    Image rows follow the second remaining axis and columns the first, so a
    z-slice shows x to the right and y downwards.
    """
    layers = slice_images(grid, axis)
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    width = len(str(max(len(layers) - 1, 0)))
    paths = []
    for i, layer in enumerate(layers):
        img = layer.T  # (rows, cols)
        p = out / f"{prefix}_{i:0{width}d}.pgm"
        _write_bytes(p, [f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode("ascii"), np.ascontiguousarray(img).tobytes()])
        paths.append(p)
    return paths


def read_pgm(path) -> np.ndarray:
    buf = _read_bytes(path)
    m = re.match(rb"P5\s+(\d+)\s+(\d+)\s+(\d+)\s", buf)
    if not m:
        raise MalformedMagicError("not a binary PGM file", 0, path)
    w, h = int(m.group(1)), int(m.group(2))
    body = buf[m.end():]
    if len(body) != w * h:
        raise TruncatedPayloadError(f"expected {w * h} pixels, found {len(body)}", m.end(), path)
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w).copy()


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    if hasattr(obj, "to_dict"):
        return _jsonable(obj.to_dict())
    return obj


def write_report(report: dict, path) -> None:
    """Write a JSON report; numpy scalars/arrays and stats objects are converted."""
    text = json.dumps(_jsonable(report), indent=2, sort_keys=True, allow_nan=True)
    Path(path).write_text(text + "\n", encoding="utf-8")


def read_report(path) -> dict:
    return json.loads(Path(path).read_text(encoding="utf-8"))

"""``nlosvox`` command line.

Every command prints machine-readable ``key=value`` lines on stdout.  Exit
codes: 0 success, 1 I/O error, 2 usage or validation error, 3 resource limit
or time budget exceeded.

Option precedence for ``reconstruct`` and ``bench``: command-line flags, then
the ``[reconstruct]`` table of the ``--config`` TOML file, then defaults.
"""

from __future__ import annotations

import argparse
import math
import statistics
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, _backend
from .backprojection import ReconstructionConfig, reconstruct
from .errors import FormatError, NlosError, ResourceLimitError, SceneError, TimeBudgetError, ValidationError
from .formats import (
    export_ply,
    export_slices,
    read_dataset,
    read_scene,
    read_volume,
    tomllib,
    write_dataset,
    write_report,
    write_volume,
)
from .geometry import build_sphere_atlas
from .transient import simulate_dataset
from .voxelizer import grid_compare, laplacian_filter

EXIT_OK, EXIT_IO, EXIT_USAGE, EXIT_RESOURCE = 0, 1, 2, 3

#: reconstruct options settable from a config file, with their defaults
RECON_DEFAULTS = {
    "method": "fast",
    "res": 64,
    "bounds": "auto",
    "mode": "float",
    "eps": "voxel",
    "threshold": 0.0,
    "dedup": True,
    "g_correction": False,
    "filter": False,
    "max_level": 5,
    "threads": None,
    "backend": None,
}


class UsageError(Exception):
    pass


def emit(out, **pairs) -> None:
    for key, value in pairs.items():
        if isinstance(value, float):
            value = repr(value)
        elif isinstance(value, (list, tuple)):
            value = ",".join(str(v) for v in value)
        print(f"{key}={value}", file=out)


# -- option parsing helpers ---------------------------------------------------


def parse_bounds(text):
    if text is None or (isinstance(text, str) and text == "auto"):
        return "auto"
    if isinstance(text, str):
        parts = text.split(",")
    else:
        parts = list(np.asarray(text, dtype=np.float64).reshape(-1))
    try:
        vals = [float(p) for p in parts]
    except ValueError:
        raise UsageError(f"--bounds expects 'auto' or six numbers, got {text!r}") from None
    if len(vals) != 6 or not all(math.isfinite(v) for v in vals):
        raise UsageError(f"--bounds expects six finite numbers, got {text!r}")
    lo, hi = np.array(vals[:3]), np.array(vals[3:])
    if np.any(hi < lo) or np.all(hi == lo):
        raise UsageError("--bounds: max must not be below min")
    return lo, hi


def parse_eps(text) -> tuple[float | None, float]:
    """``voxel`` / ``<k>voxel`` (multiples of the voxel edge) or a length in meters."""
    s = str(text).strip()
    try:
        if s.endswith("voxel"):
            k = float(s[:-5] or 1.0)
            if not k > 0:
                raise ValueError
            return None, k
        v = float(s)
        if not v > 0:
            raise ValueError
        return v, 1.0
    except ValueError:
        raise UsageError(f"--eps expects 'voxel', '<k>voxel' or a positive length, got {text!r}") from None


def load_config(path) -> dict:
    if path is None:
        return {}
    try:
        doc = tomllib.loads(Path(path).read_text(encoding="utf-8"))
    except tomllib.TOMLDecodeError as exc:
        raise UsageError(f"config {path}: {exc}") from None
    table = doc.get("reconstruct", {})
    unknown = set(table) - set(RECON_DEFAULTS)
    if unknown:
        raise UsageError(f"config {path}: unknown keys {sorted(unknown)}")
    return table


def merged_options(args, config: dict) -> dict:
    out = {}
    for key, default in RECON_DEFAULTS.items():
        flag = getattr(args, key, None)
        out[key] = flag if flag is not None else config.get(key, default)
    return out


def build_config(opts: dict) -> ReconstructionConfig:
    eps, eps_vox = parse_eps(opts["eps"])
    res = opts["res"]
    if isinstance(res, bool) or not isinstance(res, int) or res < 1:
        raise UsageError(f"--res must be a positive integer, got {res!r}")
    cfg = ReconstructionConfig(
        bounds=parse_bounds(opts["bounds"]),
        linear_resolution=res,
        method=opts["method"],
        mode=opts["mode"],
        epsilon=eps,
        epsilon_voxels=eps_vox,
        intensity_threshold=float(opts["threshold"]),
        g_correction=bool(opts["g_correction"]),
        dedup=bool(opts["dedup"]),
        max_tess_level=int(opts["max_level"]),
        threads=opts["threads"],
        backend=opts["backend"],
    )
    cfg.validate()
    return cfg


def positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return v


# -- commands -----------------------------------------------------------------


def cmd_simulate(args, out) -> int:
    scene = read_scene(args.scene)
    ds = simulate_dataset(scene, noise_photons=args.noise, seed=args.seed)
    write_dataset(ds, args.out)
    S, P, T = ds.shape
    emit(out, S=S, P=P, T=T, nonzero_bins=int(np.count_nonzero(ds.intensity)), nonzero_fraction=ds.nonzero_fraction())
    return EXIT_OK


def cmd_reconstruct(args, out) -> int:
    opts = merged_options(args, load_config(args.config))
    cfg = build_config(opts)
    ds = read_dataset(args.input)
    grid, stats = reconstruct(ds, cfg)
    if opts["filter"]:
        grid = laplacian_filter(grid)
    if args.out:
        write_volume(grid, args.out)
    if args.stats:
        write_report({"config": vars_of(cfg), "stats": stats, "dataset": {"shape": list(ds.shape)}}, args.stats)
    d = stats.to_dict()
    level_counts = d.pop("level_counts")
    emit(out, **{k: v for k, v in d.items()})
    emit(out, level_counts=";".join(f"{k}:{v}" for k, v in sorted(level_counts.items())) or "none")
    return EXIT_OK


def vars_of(cfg: ReconstructionConfig) -> dict:
    d = dict(vars(cfg))
    if not isinstance(d["bounds"], str):
        d["bounds"] = [list(map(float, b)) for b in d["bounds"]]
    return d


def cmd_filter(args, out) -> int:
    grid = laplacian_filter(read_volume(args.input))
    write_volume(grid, args.out)
    emit(out, resolution=grid.resolution, max=float(grid.values.max(initial=0.0)))
    return EXIT_OK


def cmd_export(args, out) -> int:
    if not 0.0 <= args.threshold <= 1.0:
        raise UsageError("--threshold must lie in [0, 1]")
    grid = read_volume(args.input)
    if args.format == "ply":
        n = export_ply(grid, args.out, args.threshold, binary=args.binary)
        emit(out, vertices=n)
    else:
        paths = export_slices(grid, args.out, axis="xyz".index(args.axis))
        emit(out, slices=len(paths))
    return EXIT_OK


def cmd_compare(args, out) -> int:
    cmp = grid_compare(read_volume(args.a), read_volume(args.b))
    emit(out, mse=cmp.mse, pearson=cmp.pearson, peak_offset=cmp.peak_offset)
    return EXIT_OK


# -- bench --------------------------------------------------------------------


def load_plan(path) -> dict:
    path = Path(path)
    try:
        plan = tomllib.loads(path.read_text(encoding="utf-8"))
    except tomllib.TOMLDecodeError as exc:
        raise UsageError(f"plan {path}: {exc}") from None
    if "dataset" not in plan:
        raise UsageError("plan needs a 'dataset' path")
    ds_path = Path(plan["dataset"])
    if not ds_path.is_absolute():
        ds_path = path.parent / ds_path
    resolutions = plan.get("resolutions", [])
    methods = plan.get("methods", ["traditional", "fast"])
    eps = plan.get("eps", ["voxel"])
    reps = plan.get("repetitions", 3)
    warmup = plan.get("warmup", 1)
    if not resolutions or not methods or not eps:
        raise UsageError("plan sweeps must be non-empty")
    if not all(isinstance(r, int) and r >= 1 for r in resolutions):
        raise UsageError("plan resolutions must be positive integers")
    if not isinstance(reps, int) or reps < 1 or not isinstance(warmup, int) or warmup < 0:
        raise UsageError("plan needs repetitions >= 1 and warmup >= 0")
    budget = plan.get("time_budget")
    if budget is not None and not (isinstance(budget, (int, float)) and budget > 0):
        raise UsageError("time_budget must be a positive number of seconds")
    config = plan.get("reconstruct", {})
    unknown = set(config) - set(RECON_DEFAULTS)
    if unknown:
        raise UsageError(f"plan [reconstruct]: unknown keys {sorted(unknown)}")
    return {
        "dataset": ds_path,
        "resolutions": list(resolutions),
        "methods": list(methods),
        "eps": [str(e) for e in eps],
        "repetitions": reps,
        "warmup": warmup,
        "time_budget": budget,
        "reconstruct": config,
    }


def run_bench(plan: dict, threads: int | None = None, log=None) -> tuple[dict, bool]:
    """Run the sweep grid; returns ``(report, over_budget)``.

    Traditional cells ignore the tessellation tolerance and run once per
    resolution.  Each cell records the median of ``repetitions`` timed runs
    after ``warmup`` untimed ones.
    """
    ds = read_dataset(plan["dataset"])
    atlas_cache = {}
    cells = []
    over = False
    for res in plan["resolutions"]:
        for method in plan["methods"]:
            for eps in plan["eps"] if method == "fast" else [None]:
                opts = dict(RECON_DEFAULTS, **plan["reconstruct"], method=method, res=res)
                if eps is not None:
                    opts["eps"] = eps
                if threads is not None:
                    opts["threads"] = threads
                cfg = build_config(opts)
                atlas = atlas_cache.setdefault(cfg.max_tess_level, build_sphere_atlas(cfg.max_tess_level))
                times, stats = [], None
                for i in range(plan["warmup"] + plan["repetitions"]):
                    t = time.perf_counter()
                    _, stats = reconstruct(ds, cfg, atlas)
                    t = time.perf_counter() - t
                    if i >= plan["warmup"]:
                        times.append(t)
                med = statistics.median(times)
                cell = {
                    "method": method,
                    "resolution": res,
                    "eps": eps,
                    "times": times,
                    "median": med,
                    "stats": stats.to_dict(),
                }
                if method == "fast":
                    n = max(stats.ellipsoids_emitted, 1)
                    cell["triangles_per_ellipsoid"] = stats.triangles_total / n
                    cell["touches_per_ellipsoid"] = stats.voxel_touches / n
                budget = plan["time_budget"]
                if budget is not None and med > budget:
                    cell["over_budget"] = True
                    over = True
                cells.append(cell)
                if log:
                    emit(log, cell=f"{method}@{res}" + (f"/{eps}" if eps else ""), median=med)
    speedups = []
    for c in cells:
        if c["method"] != "fast":
            continue
        base = next((t for t in cells if t["method"] == "traditional" and t["resolution"] == c["resolution"]), None)
        if base is not None:
            speedups.append({"resolution": c["resolution"], "eps": c["eps"], "speedup": base["median"] / c["median"]})
    scaling = {}
    lo_res, hi_res = min(plan["resolutions"]), max(plan["resolutions"])
    if hi_res > lo_res:
        for method in plan["methods"]:
            for eps in plan["eps"] if method == "fast" else [None]:
                sel = {c["resolution"]: c["median"] for c in cells if c["method"] == method and c["eps"] == eps}
                key = method + (f"/{eps}" if eps else "")
                scaling[key] = {"from": lo_res, "to": hi_res, "ratio": sel[hi_res] / sel[lo_res]}
    report = {
        "version": __version__,
        "backend": _backend.BACKEND,
        "dataset": str(plan["dataset"]),
        "shape": list(ds.shape),
        "nonzero_fraction": ds.nonzero_fraction(),
        "plan": {k: (str(v) if isinstance(v, Path) else v) for k, v in plan.items()},
        "cells": cells,
        "speedups": speedups,
        "scaling": scaling,
    }
    return report, over


def cmd_bench(args, out) -> int:
    plan = load_plan(args.plan)
    report, over = run_bench(plan, args.threads, log=out)
    write_report(report, args.report)
    for s in report["speedups"]:
        emit(out, **{f"speedup@{s['resolution']}" + (f"/{s['eps']}" if s["eps"] else ""): s["speedup"]})
    for key, s in report["scaling"].items():
        emit(out, **{f"scaling/{key}": s["ratio"]})
    if over:
        print("error: at least one cell exceeded the time budget", file=sys.stderr)
        return EXIT_RESOURCE
    return EXIT_OK


# -- entry point --------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="nlosvox", description="Transient back-projection by ellipsoid voxelization.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="render a dataset from a TOML scene")
    s.add_argument("--scene", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--noise", type=float, default=None, metavar="PHOTONS", help="Poisson noise, peak photon count")
    s.add_argument("--seed", type=int, default=None)
    s.set_defaults(func=cmd_simulate)

    r = sub.add_parser("reconstruct", help="back-project a dataset into a volume")
    r.add_argument("--in", dest="input", required=True)
    r.add_argument("--method", choices=("fast", "traditional"), default=None)
    r.add_argument("--res", type=int, default=None, help="voxels along the longest side")
    r.add_argument("--bounds", default=None, help="'auto' or x0,y0,z0,x1,y1,z1")
    r.add_argument("--mode", choices=("int", "float"), default=None)
    r.add_argument("--eps", default=None, help="tessellation tolerance: 'voxel', '<k>voxel' or meters")
    r.add_argument("--threshold", type=float, default=None, help="skip samples below this fraction of the peak")
    r.add_argument("--no-dedup", dest="dedup", action="store_const", const=False, default=None)
    r.add_argument("--g-correction", dest="g_correction", action="store_const", const=True, default=None)
    r.add_argument("--filter", action="store_const", const=True, default=None, help="apply the Laplacian filter")
    r.add_argument("--max-level", dest="max_level", type=int, default=None)
    r.add_argument("--backend", choices=("auto", "cython", "python"), default=None)
    r.add_argument("--threads", type=positive_int, default=None)
    r.add_argument("--config", default=None, help="TOML file with a [reconstruct] table")
    r.add_argument("--out", default=None)
    r.add_argument("--stats", default=None, help="write a JSON report here")
    r.set_defaults(func=cmd_reconstruct)

    f = sub.add_parser("filter", help="Laplacian-filter a volume")
    f.add_argument("--in", dest="input", required=True)
    f.add_argument("--out", required=True)
    f.set_defaults(func=cmd_filter)

    e = sub.add_parser("export", help="write a PLY point cloud or PGM slices")
    e.add_argument("--in", dest="input", required=True)
    e.add_argument("--format", choices=("ply", "pgm"), required=True)
    e.add_argument("--out", required=True, help="PLY file, or directory for slices")
    e.add_argument("--threshold", type=float, default=0.3)
    e.add_argument("--binary", action="store_true", help="binary little-endian PLY")
    e.add_argument("--axis", choices=("x", "y", "z"), default="z")
    e.set_defaults(func=cmd_export)

    c = sub.add_parser("compare", help="MSE, Pearson and peak offset of two volumes")
    c.add_argument("--a", required=True)
    c.add_argument("--b", required=True)
    c.set_defaults(func=cmd_compare)

    b = sub.add_parser("bench", help="timing sweep from a TOML plan")
    b.add_argument("--plan", required=True)
    b.add_argument("--report", required=True)
    b.add_argument("--threads", type=positive_int, default=None)
    b.set_defaults(func=cmd_bench)
    return p


def main(argv=None, out=None) -> int:
    out = out or sys.stdout
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args, out)
    except (UsageError, ValidationError, SceneError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        if isinstance(exc, UsageError):
            parser.print_usage(sys.stderr)
        return EXIT_USAGE
    except (ResourceLimitError, TimeBudgetError, MemoryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RESOURCE
    except (OSError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except NlosError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())

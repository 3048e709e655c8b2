"""Time the compiled kernels against the numpy fallback.

Runs the same reconstructions with ``backend="cython"`` and
``backend="python"`` and prints one line per cell with the median wall time
of each backend and their ratio.  A triangle rasterization micro-benchmark
is included as well, since that loop dominates the fast method.

    python3 benchmarks/bench_backends.py --scene scenes/two_patch.toml --res 32 48
"""

from __future__ import annotations

import argparse
import json
import statistics
import time
from pathlib import Path

import numpy as np

from nlosvox import (
    ReconstructionConfig,
    _backend,
    available_backends,
    build_sphere_atlas,
    read_scene,
    reconstruct,
    simulate_dataset,
)

ROOT = Path(__file__).resolve().parent.parent


def median_time(fn, repetitions: int) -> float:
    times = []
    for _ in range(repetitions):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return statistics.median(times)


def bench_rasterize(repetitions: int) -> dict:
    rng = np.random.default_rng(0)
    centres = rng.uniform(4, 60, size=(4000, 1, 3))
    tris = centres + rng.normal(scale=1.5, size=(4000, 3, 3))
    res = (64, 64, 64)
    out = {}
    for name in ("cython", "python"):
        k = _backend.load(name)
        out[name] = median_time(lambda: k.rasterize(tris, np.zeros(3), 1.0, res), repetitions)
    return out


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--scene", default=str(ROOT / "scenes" / "two_patch.toml"))
    p.add_argument("--res", type=int, nargs="+", default=[32])
    p.add_argument("--methods", nargs="+", default=["fast", "traditional"], choices=["fast", "traditional"])
    p.add_argument("--repetitions", type=int, default=3)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--json", default=None, help="also write the results here")
    args = p.parse_args(argv)

    if "cython" not in available_backends():
        p.error("compiled kernels are not built; nothing to compare")

    ds = simulate_dataset(read_scene(args.scene))
    atlas = build_sphere_atlas(5)
    bounds = ((-0.6, -0.6, 0.2), (0.6, 0.6, 1.4))
    rows = []

    r = bench_rasterize(args.repetitions)
    rows.append({"cell": "rasterize 4000 triangles", **r})
    for method in args.methods:
        for res in args.res:
            row = {"cell": f"{method}@{res}"}
            for name in ("cython", "python"):
                cfg = ReconstructionConfig(
                    linear_resolution=res, bounds=bounds, method=method, backend=name, threads=args.threads
                )
                reconstruct(ds, cfg, atlas)  # warm-up
                row[name] = median_time(lambda: reconstruct(ds, cfg, atlas), args.repetitions)
            rows.append(row)

    width = max(len(row["cell"]) for row in rows)
    print(f"{'cell':<{width}}  {'cython s':>10}  {'python s':>10}  {'ratio':>7}")
    for row in rows:
        row["ratio"] = row["python"] / row["cython"]
        print(f"{row['cell']:<{width}}  {row['cython']:10.4f}  {row['python']:10.4f}  {row['ratio']:7.1f}")
    if args.json:
        Path(args.json).write_text(json.dumps(rows, indent=2))
    return 0


if __name__ == "__main__":
    raise SystemExit(main())

"""Kernel backend selection.

The compiled extension is used when importable; otherwise (or when
``NLOSVOX_BACKEND=python``) the numpy implementation takes over.  Both expose
``rasterize``, ``splat`` and ``backproject`` with identical signatures.
"""

from __future__ import annotations

import importlib
import os


def load(name: str | None = None):
    """Return the kernel module called ``name`` ("cython" or "python")."""
    if name in (None, "auto"):
        name = os.environ.get("NLOSVOX_BACKEND", "auto")
    if name == "python":
        return importlib.import_module("nlosvox._purepy")
    if name == "cython":
        return importlib.import_module("nlosvox._kernels")
    if name != "auto":
        raise ValueError(f"unknown backend {name!r}")
    try:
        return importlib.import_module("nlosvox._kernels")
    except ImportError:
        return importlib.import_module("nlosvox._purepy")


def available() -> list[str]:
    names = ["python"]
    try:
        importlib.import_module("nlosvox._kernels")
    except ImportError:
        pass
    else:
        names.insert(0, "cython")
    return names


kernels = load()
BACKEND = kernels.NAME

"""Build the optional compiled kernels.

The package works without them: if the extension fails to compile,
``nlosvox._backend`` falls back to the numpy implementation.
"""
import os
import sys

import numpy
from setuptools import Extension, setup
from setuptools.command.build_ext import build_ext


class OptionalBuildExt(build_ext):
    def run(self):
        try:
            super().run()
        except Exception as exc:  # noqa: BLE001
            self._warn(exc)

    def build_extension(self, ext):
        try:
            super().build_extension(ext)
        except Exception as exc:  # noqa: BLE001
            self._warn(exc)

    @staticmethod
    def _warn(exc):
        sys.stderr.write(f"warning: compiled kernels not built ({exc}); using numpy fallback\n")


def extensions():
    try:
        from Cython.Build import cythonize
    except ImportError:
        return []
    openmp = os.environ.get("NLOSVOX_NO_OPENMP") is None
    ext = Extension(
        "nlosvox._kernels",
        ["src/nlosvox/_kernels.pyx"],
        include_dirs=[numpy.get_include(), "src/nlosvox"],
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
        # no fp contraction: results must match the numpy fallback bit for bit
        extra_compile_args=["-O3", "-msse4.1", "-ffp-contract=off"] + (["-fopenmp"] if openmp else []),
        extra_link_args=["-fopenmp"] if openmp else [],
    )
    return cythonize(
        [ext],
        compiler_directives={
            "language_level": 3,
            "boundscheck": False,
            "wraparound": False,
            "cdivision": True,
            "initializedcheck": False,
        },
    )


setup(ext_modules=extensions(), cmdclass={"build_ext": OptionalBuildExt})

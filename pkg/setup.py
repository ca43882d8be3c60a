"""Build script for the compiled tape kernels.

The extension is optional: if Cython or a C compiler is unavailable the
package installs without it and `scone._kernels` falls back to the pure
Python implementation at import time.
"""

import os

from setuptools import Extension, setup

# -ffp-contract=off keeps the compiled kernels bit-identical with the pure
# Python fallback (no fused multiply-add contraction).
EXTRA_COMPILE_ARGS = ["-O3", "-ffp-contract=off"]


def maybe_cythonize():
    if os.environ.get("SCONE_SKIP_EXT"):
        return []
    try:
        from Cython.Build import cythonize
    except ImportError:
        return []
    extensions = [
        Extension(
            "scone._kernels._core_cy",
            ["src/scone/_kernels/_core_cy.pyx"],
            extra_compile_args=EXTRA_COMPILE_ARGS,
        )
    ]
    return cythonize(
        extensions,
        compiler_directives={
            "language_level": "3",
            "boundscheck": False,
            "wraparound": False,
            "initializedcheck": False,
            "cdivision": True,
        },
    )


setup(ext_modules=maybe_cythonize())

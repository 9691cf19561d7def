"""Build script: compiles the optional Cython speedup kernels.

The package works without the extension (pure-Python kernels are selected
at import time), so a failed compile downgrades to a warning instead of
aborting the install.
"""

import os
import sys

from setuptools import setup

COMPILE_ARGS = ["-O3", "-ffp-contract=off", "-fno-fast-math"]


def extensions():
    if not os.path.exists("src/aurasim/kernels/_speedups.pyx"):
        return []
    try:
        from Cython.Build import cythonize
        from setuptools import Extension
    except ImportError:
        print("aurasim: Cython not available, skipping compiled kernels", file=sys.stderr)
        return []
    return cythonize(
        [
            Extension(
                "aurasim.kernels._speedups",
                ["src/aurasim/kernels/_speedups.pyx"],
                extra_compile_args=COMPILE_ARGS,
            )
        ],
        compiler_directives={"language_level": "3"},
    )


try:
    setup(ext_modules=extensions())
except SystemExit:
    raise
except Exception as exc:  # noqa: BLE001 - any compile failure falls back to pure python
    print(f"aurasim: compiled kernels unavailable ({exc}); installing pure-Python build", file=sys.stderr)
    setup(ext_modules=[])

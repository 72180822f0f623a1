"""Build script.

The compiled kernel extension is optional: if Cython or a C compiler is
unavailable the package installs anyway and falls back to the numpy
kernels at import time. Set GRAPHEXPLAIN_NO_EXT=1 to skip the extension
build explicitly.
"""

import os

from setuptools import setup

ext_modules = []
if os.environ.get("GRAPHEXPLAIN_NO_EXT") != "1":
    try:
        import numpy as np
        from Cython.Build import cythonize
        from setuptools import Extension

        ext_modules = cythonize(
            [
                Extension(
                    "graphexplain.kernels._compiled",
                    ["src/graphexplain/kernels/_compiled.pyx"],
                    include_dirs=[np.get_include()],
                    define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                )
            ],
            compiler_directives={
                "language_level": 3,
                "boundscheck": False,
                "wraparound": False,
                "cdivision": True,
                "initializedcheck": False,
            },
        )
    except Exception:
        ext_modules = []

setup(ext_modules=ext_modules)

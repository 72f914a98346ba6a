import os

import numpy as np
from setuptools import Extension, setup

# TASKDB_NO_EXT=1 skips the compiled core; taskdb.kernels then falls back to numpy.
ext_modules = []
if not os.environ.get("TASKDB_NO_EXT"):
    from Cython.Build import cythonize

    ext_modules = cythonize(
        [
            Extension(
                "taskdb._kernels",
                ["src/taskdb/_kernels.pyx"],
                include_dirs=[np.get_include()],
                extra_compile_args=["-O3"],
            )
        ],
        compiler_directives={
            "language_level": 3,
            "boundscheck": False,
            "wraparound": False,
            "cdivision": True,
        },
    )

setup(ext_modules=ext_modules)

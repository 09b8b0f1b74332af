"""Build script for the compiled rotation kernel.

The package works without the extension (a numpy fallback is selected at
import time); building it just makes the SVD re-compression path fast.
"""

import numpy as np
from setuptools import Extension, setup

try:
    from Cython.Build import cythonize

    extensions = cythonize(
        [
            Extension(
                "fedlora._kernels._jacobi",
                ["src/fedlora/_kernels/_jacobi.pyx"],
                include_dirs=[np.get_include()],
                extra_compile_args=["-O3"],
            )
        ],
        compiler_directives={"language_level": "3"},
    )
except ImportError:
    extensions = []

setup(ext_modules=extensions)

"""Build script for the compiled convolution kernels.

The package works without the extension (a numpy fallback is selected at
import time), so failures here should not abort installation outright; we
let setuptools surface the error only when the extension itself is requested.
"""

import numpy
from Cython.Build import cythonize
from setuptools import Extension, setup

extensions = [
    Extension(
        "uaseg._engine._kernels",
        sources=["src/uaseg/_engine/_kernels.pyx"],
        include_dirs=[numpy.get_include()],
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
        extra_compile_args=["-O3"],
    )
]

setup(
    ext_modules=cythonize(
        extensions,
        language_level=3,
        compiler_directives={
            "boundscheck": False,
            "wraparound": False,
            "cdivision": True,
            "initializedcheck": False,
        },
    )
)

"""Builds the optional compiled kernel extension.

The package works without it: magic.engine.kernels falls back to the
numpy implementation when the extension is missing.
"""

import numpy
from setuptools import setup, Extension

try:
    from Cython.Build import cythonize

    extensions = cythonize(
        [
            Extension(
                "magic.engine.kernels._cykernels",
                sources=["src/magic/engine/kernels/_cykernels.pyx"],
                include_dirs=[numpy.get_include()],
                extra_compile_args=["-O3"],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
            )
        ],
        language_level=3,
    )
except ImportError:
    extensions = []

setup(ext_modules=extensions)

"""Build script for the optional compiled attention kernel.

The package works without the extension: packbert.kernels falls back to the
numpy reference implementation at import time.  Set PACKBERT_NO_EXT=1 to skip
compilation entirely (useful on machines without a C toolchain).
"""

import os

from setuptools import Extension, setup

ext_modules = []
if os.environ.get("PACKBERT_NO_EXT") != "1":
    try:
        import numpy
        from Cython.Build import cythonize

        ext_modules = cythonize(
            [
                Extension(
                    "packbert.kernels._attnk",
                    ["src/packbert/kernels/_attnk.pyx"],
                    include_dirs=[numpy.get_include()],
                    define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                    extra_compile_args=["-O3"],
                )
            ],
            compiler_directives={"language_level": "3"},
        )
    except ImportError:
        ext_modules = []

setup(ext_modules=ext_modules)

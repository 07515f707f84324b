"""Build the optional Cython kernels.

The package imports and runs without them; ``sparsedecode.kernels`` falls
back to the numpy implementation when the extension is missing.
"""
import os

from setuptools import setup

ext_modules = []
if os.environ.get("SPARSEDECODE_NO_EXT") != "1":
    try:
        import numpy as np
        from Cython.Build import cythonize
        from setuptools import Extension

        ext_modules = cythonize(
            [
                Extension(
                    "sparsedecode._kernels",
                    ["src/sparsedecode/_kernels.pyx"],
                    include_dirs=[np.get_include()],
                    extra_compile_args=["-O3"],
                    define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                )
            ],
            compiler_directives={"language_level": "3"},
        )
    except ImportError:
        ext_modules = []

setup(ext_modules=ext_modules)

import os

import numpy as np
from Cython.Build import cythonize
from setuptools import Extension, setup

# the kernels must round exactly like the numpy fallback: no fused multiply-add
compile_args = ["-O3", "-ffp-contract=off"]

ext_modules = cythonize(
    [
        Extension(
            "cellstream._core",
            ["src/cellstream/_core.pyx"],
            include_dirs=[np.get_include()],
            extra_compile_args=compile_args,
            define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
        )
    ],
    compiler_directives={"language_level": "3"},
)

if os.environ.get("CELLSTREAM_NO_EXT"):
    ext_modules = []

setup(ext_modules=ext_modules)

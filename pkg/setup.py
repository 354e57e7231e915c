import os
import sys

import numpy as np
from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:  # pure-Python install, numpy fallback is used at runtime
    cythonize = None

compile_args = ["-O3", "-ffp-contract=off"]
if os.environ.get("LMNET_NATIVE", "1") != "0" and sys.platform != "win32":
    compile_args.append("-march=native")

ext_modules = []
if cythonize is not None and os.environ.get("LMNET_NO_EXT") != "1":
    ext_modules = cythonize(
        [
            Extension(
                "lmnet._kernels",
                ["src/lmnet/_kernels.pyx"],
                include_dirs=[np.get_include()],
                extra_compile_args=compile_args,
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
            )
        ],
        compiler_directives={"language_level": "3"},
    )

setup(ext_modules=ext_modules)

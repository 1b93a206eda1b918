"""Builds the optional compiled kernel extension.

The package works without the extension (a numpy fallback is selected at
import time), so a failed compile only costs speed, not functionality.
"""

import os

import numpy as np
from setuptools import setup

ext_modules = []
if os.path.exists("src/equiscene/_kernels/_core.pyx"):
    try:
        from Cython.Build import cythonize

        ext_modules = cythonize(
            ["src/equiscene/_kernels/_core.pyx"],
            language_level=3,
            compiler_directives={"boundscheck": False, "wraparound": False, "cdivision": True},
        )
    except ImportError:
        pass

setup(
    ext_modules=ext_modules,
    include_dirs=[np.get_include()],
)

"""Build script.

The physics inner loop has a Cython implementation in
``src/proprospin/env/_kernels.pyx``.  Building it is optional: if Cython or a
C compiler is unavailable the package installs anyway and falls back to the
NumPy kernel at import time.
"""

import os

from setuptools import setup

PYX = "src/proprospin/env/_kernels.pyx"

ext_modules = []
try:
    import numpy as np
    from Cython.Build import cythonize
    from setuptools import Extension

    if os.path.exists(PYX):
        ext_modules = cythonize(
            [
                Extension(
                    "proprospin.env._kernels",
                    [PYX],
                    include_dirs=[np.get_include()],
                    define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                )
            ],
            language_level=3,
        )
except ImportError:
    pass

setup(ext_modules=ext_modules)

"""Build script for the optional compiled coordinate-descent kernel.

The package works without the extension (a pure numpy fallback is selected at
import time), so the build only fails if compilation itself fails, never
because Cython is absent.
"""

from setuptools import Extension, setup

try:
    import numpy
    from Cython.Build import cythonize

    extensions = cythonize(
        [
            Extension(
                "dwisparse._kernels._cd_fast",
                sources=["src/dwisparse/_kernels/_cd_fast.pyx"],
                include_dirs=[numpy.get_include()],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
            )
        ],
        language_level=3,
    )
except ImportError:
    extensions = []

setup(ext_modules=extensions)

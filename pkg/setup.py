"""Build script for the optional compiled rasterizer kernels.

The package works without the extension (a pure-NumPy fallback is selected at
import time), so any failure here downgrades to a source-only install rather
than aborting it.
"""

from setuptools import Extension, setup

ext_modules = []
try:
    import numpy as np
    from Cython.Build import cythonize

    ext_modules = cythonize(
        [
            Extension(
                "dynsplat.rasterizer._kernels",
                ["src/dynsplat/rasterizer/_kernels.pyx"],
                include_dirs=[np.get_include()],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                extra_compile_args=["-O3"],
            )
        ],
        language_level=3,
    )
except Exception as exc:  # pragma: no cover - exercised only on broken toolchains
    print(f"dynsplat: skipping compiled kernels ({exc}); pure-NumPy fallback will be used")

setup(ext_modules=ext_modules)

"""Builds the optional compiled kernel extension.

The package works without it (pconet.tensor falls back to the NumPy
backend), so a failed extension build should not block installation:
install with a plain `pip install -e . --no-build-isolation` and check
`pconet.tensor.available_backends()` afterwards.
"""

import os

from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:
    cythonize = None

extra_compile = os.environ.get("PCONET_CFLAGS", "-O3 -fopenmp -march=x86-64-v3").split()
extra_link = ["-fopenmp"] if "-fopenmp" in extra_compile else []

extensions = [
    Extension(
        "pconet._kernels",
        sources=["src/pconet/_kernels.pyx"],
        extra_compile_args=extra_compile,
        extra_link_args=extra_link,
    )
]

setup(
    ext_modules=cythonize(extensions, language_level="3") if cythonize else [],
)

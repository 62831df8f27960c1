"""Build the optional compiled kernels.

The package works without them: ``skipaccel.numerics.kernels`` falls back to
the numpy implementations when the extension cannot be imported. Set
SKIPACCEL_NO_EXT=1 to skip the build entirely.
"""
import os

from setuptools import setup

ext_modules = []
if not os.environ.get("SKIPACCEL_NO_EXT"):
    try:
        import numpy as np
        from Cython.Build import cythonize
        from setuptools import Extension

        ext_modules = cythonize(
            [
                Extension("skipaccel.numerics._ckernels", ["src/skipaccel/numerics/_ckernels.pyx"],
                          include_dirs=[np.get_include()], extra_compile_args=["-O3"]),
                Extension("skipaccel.kvsim._csched", ["src/skipaccel/kvsim/_csched.pyx"],
                          include_dirs=[np.get_include()], extra_compile_args=["-O3"]),
            ],
            compiler_directives={"language_level": "3"},
        )
    except ImportError:
        ext_modules = []

setup(ext_modules=ext_modules)

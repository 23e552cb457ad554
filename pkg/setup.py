"""Build script for the optional compiled kernel extension.

The package works without the extension (a pure numpy fallback is selected at
import time), so a failed compile downgrades to a warning instead of aborting
the install.
"""

import warnings

import numpy as np
from setuptools import Extension, setup
from setuptools.command.build_ext import build_ext


extensions = [
    Extension(
        "faudit.kernels._cykernels",
        ["src/faudit/kernels/_cykernels.pyx"],
        include_dirs=[np.get_include()],
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
        extra_compile_args=["-O3"],
    )
]


class optional_build_ext(build_ext):
    """Build the extension if possible; fall back to pure python otherwise."""

    def run(self):
        try:
            super().run()
        except Exception as exc:  # compiler or cython missing
            warnings.warn(f"compiled kernels skipped ({exc}); using numpy fallback")

    def build_extension(self, ext):
        try:
            super().build_extension(ext)
        except Exception as exc:
            warnings.warn(f"compiled kernels skipped ({exc}); using numpy fallback")


try:
    from Cython.Build import cythonize

    ext_modules = cythonize(extensions, compiler_directives={"language_level": "3"})
except ImportError:
    ext_modules = []

setup(ext_modules=ext_modules, cmdclass={"build_ext": optional_build_ext})

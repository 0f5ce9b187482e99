"""Build script: compiles the optional C extension with the hot kernels.

The package works without the extension (a numpy fallback is selected at
import time), so any compilation problem downgrades to a pure-Python build
instead of failing the install.
"""

import sys

from setuptools import setup

ext_modules = []
try:
    import numpy
    from Cython.Build import cythonize
    from setuptools import Extension

    ext_modules = cythonize(
        [
            Extension(
                "simts._ckernels",
                sources=["src/simts/_ckernels.pyx"],
                include_dirs=[numpy.get_include()],
                extra_compile_args=["-O3"],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
            )
        ],
        compiler_directives={"language_level": "3"},
    )
except Exception as exc:  # noqa: BLE001 - any build-chain problem means "no extension"
    print(f"simts: building without compiled kernels ({exc})", file=sys.stderr)

setup(ext_modules=ext_modules)

"""Optional compiled core. The package is pure python with a numpy fallback;
if Cython and a C compiler are available the squared-exponential kernel gets
a fused native implementation (see sagedynx/_backend.py for selection)."""

from setuptools import setup

ext_modules = []
try:
    import numpy
    from Cython.Build import cythonize

    ext_modules = cythonize(
        ["src/sagedynx/_core.pyx"],
        compiler_directives={"language_level": "3"},
    )
    include_dirs = [numpy.get_include()]
    for ext in ext_modules:
        ext.include_dirs = include_dirs
        ext.extra_compile_args = ["-O3"]
except Exception:
    ext_modules = []

setup(ext_modules=ext_modules)

"""Build the optional compiled kernel; the package falls back to numpy without it."""

from setuptools import setup

try:
    import numpy as np
    from Cython.Build import cythonize

    ext_modules = cythonize(["src/mibkit/_kernels.pyx"], language_level=3, quiet=True)
    for ext in ext_modules:
        ext.include_dirs.append(np.get_include())
        ext.define_macros.append(("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION"))
except ImportError:  # no Cython: pure-Python install
    ext_modules = []

setup(ext_modules=ext_modules)

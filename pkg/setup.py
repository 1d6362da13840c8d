import numpy
from setuptools import Extension, setup

# The compiled kernels are an optional speedup: if Cython (or a C compiler)
# is unavailable the package falls back to the numpy reference kernels at
# import time, so the build must not hard-fail here.
try:
    from Cython.Build import cythonize
except ImportError:
    ext_modules = []
else:
    ext_modules = cythonize(
        [
            Extension(
                "adq._kernels._core",
                ["src/adq/_kernels/_core.pyx"],
                extra_compile_args=["-O3"],
                include_dirs=[numpy.get_include()],
            )
        ],
        language_level=3,
    )

setup(ext_modules=ext_modules)

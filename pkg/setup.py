import numpy
from setuptools import setup
from Cython.Build import cythonize

setup(
    ext_modules=cythonize(
        "src/foley_adapter/kernels/_ckernels.pyx",
        compiler_directives={"language_level": 3, "boundscheck": False, "wraparound": False},
    ),
    include_dirs=[numpy.get_include()],
)

"""Build the optional compiled kernel extension.

If Cython or a compiler is missing the package still installs; the
numpy fallback in ``unidial.autograd._kernels_py`` is used instead.
"""
from setuptools import setup

ext_modules = []
try:
    import numpy
    from Cython.Build import cythonize
    from setuptools.extension import Extension

    ext_modules = cythonize(
        [
            Extension(
                "unidial.autograd._kernels",
                ["src/unidial/autograd/_kernels.pyx"],
                include_dirs=[numpy.get_include()],
                extra_compile_args=["-O3"],
            )
        ],
        compiler_directives={"language_level": "3"},
    )
except ImportError:
    pass

setup(ext_modules=ext_modules)

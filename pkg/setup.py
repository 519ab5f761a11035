"""Build the optional compiled kernels; the package works without them."""
import logging

from setuptools import setup

log = logging.getLogger("setup")


def extensions():
    try:
        import numpy
        from Cython.Build import cythonize
        from setuptools import Extension
    except ImportError as exc:
        log.warning("compiled kernels skipped (%s); the numpy fallback will be used", exc)
        return []
    ext = Extension(
        "maskkv._ckernels",
        ["src/maskkv/_ckernels.pyx"],
        include_dirs=[numpy.get_include()],
        language="c++",
        extra_compile_args=["-O3"],
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
    )
    return cythonize([ext], language_level=3, compiler_directives={"boundscheck": False,
                                                                   "wraparound": False})


setup(ext_modules=extensions())

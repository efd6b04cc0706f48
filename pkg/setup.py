import os

from setuptools import setup

ext_modules = []
if os.environ.get("GEOMFLOW_NO_EXT", "0") != "1" and os.path.exists(
    "src/geomflow/_engine_c.pyx"
):
    try:
        import numpy
        from Cython.Build import cythonize
        from setuptools import Extension

        ext_modules = cythonize(
            [
                Extension(
                    "geomflow._engine_c",
                    ["src/geomflow/_engine_c.pyx"],
                    include_dirs=[numpy.get_include()],
                    extra_compile_args=["-O3"],
                    define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                )
            ],
            language_level=3,
        )
    except ImportError:
        # no Cython available: install the pure python package, the runtime
        # backend selector falls back automatically
        ext_modules = []

setup(ext_modules=ext_modules)

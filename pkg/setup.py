import os

import numpy as np
from setuptools import setup
from setuptools.command.build_ext import build_ext

try:
    from Cython.Build import cythonize
    from setuptools import Extension

    openmp = [] if os.environ.get("CTNAS_NO_OPENMP") else ["-fopenmp"]
    arch = [] if os.environ.get("CTNAS_PORTABLE") else ["-march=native"]
    # lets gcc vectorise float reductions; results stay deterministic per build
    fast = ["-fassociative-math", "-fno-signed-zeros", "-fno-trapping-math"]
    ext_modules = cythonize(
        [
            Extension(
                "ctnas.core._kernels_ext",
                ["src/ctnas/core/_kernels_ext.pyx"],
                include_dirs=[np.get_include(), "src/ctnas/core"],
                extra_compile_args=["-O3"] + arch + fast + openmp,
                extra_link_args=openmp,
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
            )
        ],
        compiler_directives={"language_level": "3"},
    )
except ImportError:
    ext_modules = []


class optional_build_ext(build_ext):
    # the numpy kernels cover for a failed compile
    def run(self):
        try:
            super().run()
        except Exception as exc:  # noqa: BLE001
            print(f"WARNING: compiled kernels not built ({exc}); numpy fallback will be used")

    def build_extension(self, ext):
        try:
            super().build_extension(ext)
        except Exception as exc:  # noqa: BLE001
            print(f"WARNING: could not build {ext.name} ({exc}); numpy fallback will be used")


setup(ext_modules=ext_modules, cmdclass={"build_ext": optional_build_ext})

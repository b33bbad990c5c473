"""Build script: compiles the discrete-event inner loop when a C toolchain
is available, and falls back to the pure-Python loop otherwise."""

import warnings

from setuptools import Extension, setup
from setuptools.command.build_ext import build_ext


class OptionalBuildExt(build_ext):
    """Make the extension build best-effort: the package works without it."""

    def run(self):
        try:
            super().run()
        except Exception as exc:  # compiler missing, headers missing, ...
            warnings.warn(f"skipping compiled simulator core ({exc}); "
                          "the pure-Python loop will be used")

    def build_extension(self, ext):
        try:
            super().build_extension(ext)
        except Exception as exc:
            warnings.warn(f"failed to build {ext.name} ({exc}); "
                          "the pure-Python loop will be used")


def extensions():
    try:
        import numpy
        from Cython.Build import cythonize
    except ImportError:
        return []
    ext = Extension(
        "evrate._simcore",
        ["src/evrate/_simcore.pyx"],
        include_dirs=[numpy.get_include()],
        # -ffp-contract=off keeps the arithmetic bit-identical with the
        # pure-Python loop (no FMA contraction).
        extra_compile_args=["-O3", "-ffp-contract=off"],
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
    )
    return cythonize([ext], compiler_directives={"language_level": "3"})


setup(ext_modules=extensions(), cmdclass={"build_ext": OptionalBuildExt})

from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:  # pure-python install; mvclip._kernels falls back to numpy
    ext_modules = []
else:
    ext_modules = cythonize(
        [
            Extension(
                "mvclip._kernels._fast",
                ["src/mvclip/_kernels/_fast.pyx"],
                extra_compile_args=["-O3", "-ffp-contract=off"],
            )
        ],
        language_level=3,
    )

setup(ext_modules=ext_modules)

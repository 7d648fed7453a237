from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:  # numpy fallback kernels are used at runtime
    ext_modules = []
else:
    ext_modules = cythonize(
        [Extension("grayvfm._ckernels", ["src/grayvfm/_ckernels.pyx"], extra_compile_args=["-O3"])],
        compiler_directives={"language_level": "3"},
    )

setup(ext_modules=ext_modules)

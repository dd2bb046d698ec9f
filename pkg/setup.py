"""Build script for the native kernel extension.

The measured loops (atomic read-modify-writes, pointer chases, sweeps) must
run as real machine instructions, so they live in a small C extension that
releases the GIL around every timed region.
"""

from setuptools import Extension, setup

kernels = Extension(
    "atomicbench._kernels",
    sources=["src/atomicbench/_kernelsmodule.c"],
    extra_compile_args=["-O2", "-fno-strict-aliasing"],
)

setup(ext_modules=[kernels])

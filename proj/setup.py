import glob
import os

from pybind11.setup_helpers import Pybind11Extension, build_ext
from setuptools import setup

eigen_candidates = ["/usr/include/eigen3", "/usr/local/include/eigen3"]
eigen = next((p for p in eigen_candidates if os.path.isdir(p)), eigen_candidates[0])

ext = Pybind11Extension(
    "latent_scalpel._core",
    sorted(glob.glob("src/*.cpp")) + ["bindings/module.cpp"],
    include_dirs=["include", "vendor", eigen],
    cxx_std=20,
    extra_compile_args=["-O2"],
)

setup(ext_modules=[ext], cmdclass={"build_ext": build_ext})

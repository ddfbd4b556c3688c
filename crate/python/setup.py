"""Builds the Rust extension with cargo and ships it inside the package.

Install from the repository root with:
    pip install -e python --no-build-isolation
"""

import pathlib
import shutil
import subprocess

from setuptools import setup
from setuptools.command.build_py import build_py

HERE = pathlib.Path(__file__).resolve().parent
REPO = HERE.parent


class CargoBuildPy(build_py):
    def run(self):
        subprocess.check_call(
            ["cargo", "build", "--release", "-p", "vton-py"], cwd=REPO
        )
        built = REPO / "target" / "release" / "libvton_py.so"
        dest = HERE / "vton_py" / "_native.so"
        shutil.copyfile(built, dest)
        super().run()


setup(
    name="vton-py",
    version="0.1.0",
    description="Python bindings for the two-stage video virtual try-on toolkit",
    packages=["vton_py"],
    package_data={"vton_py": ["_native.so"]},
    cmdclass={"build_py": CargoBuildPy},
    zip_safe=False,
)

# Copyright 2026 The dynavatar Authors
#
# Licensed under the Apache License, Version 2.0 (the "License");
# you may not use this file except in compliance with the License.
# You may obtain a copy of the License at
#
#   http://www.apache.org/licenses/LICENSE-2.0
#
# Unless required by applicable law or agreed to in writing, software
# distributed under the License is distributed on an "AS IS" BASIS,
# WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
# See the License for the specific language governing permissions and
# limitations under the License.

from setuptools import setup


DATA_FILES = ["data/skeleton.json"]


VERSION = "0.1.0"


INSTALL_REQUIRES = [
    "numpy>=1.24",
    "scipy>=1.10",
    "torch>=2.1",
    "scikit-image>=0.21",
    "imageio>=2.28",
    "qcore>=1.10",
]


if __name__ == "__main__":
    with open("./README.rst", encoding="utf-8") as f:
        long_description = f.read()

    setup(
        name="dynavatar",
        version=VERSION,
        description="Two-stage motion-dependent avatar reconstruction from synthetic video",
        long_description=long_description,
        long_description_content_type="text/x-rst",
        packages=["dynavatar", "dynavatar.tests"],
        package_data={"dynavatar": DATA_FILES},
        install_requires=INSTALL_REQUIRES,
        entry_points={"console_scripts": ["dynavatar = dynavatar.cli:main"]},
    )

"""
rerender_pi
Two-branch neural re-rendering of low-quality captures at desk scale.
"""

import sys
from setuptools import setup, find_packages

short_description = __doc__.split("\n")

# from https://github.com/pytest-dev/pytest-runner#conditional-requirement
needs_pytest = {'pytest', 'test', 'ptr'}.intersection(sys.argv)
pytest_runner = ['pytest-runner'] if needs_pytest else []

try:
    with open("README.md", "r") as handle:
        long_description = handle.read()
except OSError:
    long_description = "\n".join(short_description[2:])

setup(
    # Self-descriptive entries which should always be present
    name='rerender_pi',
    description=short_description[1],
    long_description=long_description,
    long_description_content_type="text/markdown",
    version='0.1.0',
    license='LGPLv2.1',

    # Which Python importable modules should be included when your package is installed
    packages=find_packages(),

    # Ships rerender_pi/data/default_config.json
    include_package_data=True,
    package_data={'rerender_pi': ['data/*.json']},

    # Allows `setup.py test` to work correctly with pytest
    setup_requires=[] + pytest_runner,
    install_requires=['numpy>=1.17', 'networkx>=2.0', 'scipy>=1.3', 'Pillow>=6.0', 'matplotlib>=3.1'],
    tests_require=['pytest>=3.9', 'hypothesis>=4.0'],
    entry_points={'console_scripts': ['rerender-pi = rerender_pi.cli:main']},
    python_requires=">=3.7",
    zip_safe=False,
)

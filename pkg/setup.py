from setuptools import setup, find_packages

# MANIFEST.in ensures that requirements are included in `sdist`
install_requires = open('requirements.txt').read().split()

with open("README.md", "r") as fh:
    long_description = fh.read()

with open("version.txt", "r") as fh:
    version = fh.read().strip()

setup(name='cosub',
      version=version,
      classifiers=[
          'Development Status :: 3 - Alpha',
          'Intended Audience :: Science/Research',
          'Topic :: Scientific/Engineering :: Artificial Intelligence',
          'License :: OSI Approved :: Apache Software License',
          'Programming Language :: Python :: 3',
          'Programming Language :: Python :: 3.8',
      ],
      description='Submodel co-training with efficient stochastic depth',
      long_description=long_description,
      long_description_content_type="text/markdown",
      license='Apache 2.0',
      packages=find_packages(exclude=("*.tests",)),
      entry_points={
          'console_scripts': ['cosub=cosub.cli:main'],
      },
      python_requires='>=3.8',
      install_requires=install_requires,
      zip_safe=False)

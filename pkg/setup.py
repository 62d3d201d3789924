#!/usr/bin/env python

from os.path import exists
from setuptools import setup

version = {}
with open('metaspk/_version.py') as f:
    exec(f.read(), version)

setup(name='metaspk',
      version=version['__version__'],
      description=('Episodic speaker embeddings for diarization and '
                   'verification'),
      keywords='speaker diarization verification meta-learning',
      license='BSD',
      packages=['metaspk',
                'metaspk.curried'],
      package_data={'metaspk': ['tests/*.py']},
      install_requires=['numpy>=1.22', 'scipy>=1.8', 'toolz>=0.12'],
      entry_points={'console_scripts': ['metaspk = metaspk.cli:main']},
      long_description=(open('README.rst').read() if exists('README.rst')
                        else ''),
      zip_safe=False,
      python_requires=">=3.8",
      classifiers=[
          "Development Status :: 3 - Alpha",
          "License :: OSI Approved :: BSD License",
          "Programming Language :: Python",
          "Programming Language :: Python :: 3",
          "Programming Language :: Python :: 3.8",
          "Programming Language :: Python :: 3.9",
          "Programming Language :: Python :: 3.10",
          "Programming Language :: Python :: 3.11",
          "Programming Language :: Python :: 3.12",
          "Programming Language :: Python :: 3.13",
          "Topic :: Multimedia :: Sound/Audio :: Speech"])

#!/usr/bin/env python
# -*- coding: utf-8 -*-

from setuptools import find_packages, setup

setup(
    name='semalignvc',
    version='0.1.0',
    description='Zero-shot voice conversion with semantically aligned speech tokens',
    license='GPLv3',
    packages=find_packages(),
    package_data={'semalignvc': ['config.ini', 'tests/data/*']},
    python_requires='>=3.8',
    install_requires=[
        'numpy', 'scipy', 'pandas', 'scikit-learn', 'tqdm', 'tabulate', 'smart_open',
        'torch', 'librosa', 'soundfile', 'matplotlib', 'filelock',
    ],
    extras_require={
        'text': ['transformers'],
        'test': ['pytest'],
    },
    entry_points={
        'console_scripts': ['semalignvc = semalignvc.cli:main'],
    },
)

from setuptools import setup, find_packages
import os


def get_long_description():
    with open(os.path.join(
        os.path.dirname(os.path.abspath(__file__)), 'README.md'
    ), encoding='utf8') as fp:
        return fp.read()


def get_version():
    path = os.path.join(
        os.path.dirname(os.path.abspath(__file__)), 'combinet', 'version.py'
    )
    g = {}
    exec(open(path).read(), g)
    return g['__version__']


setup(
    name='combinet',
    version=get_version(),
    description='Compact Bayesian segmentation networks with Monte Carlo Dropout',
    long_description=get_long_description(),
    long_description_content_type='text/markdown',
    license='Apache License, Version 2.0',
    packages=find_packages(exclude=['tests']),
    package_data={
        'combinet': ['templates/*.txt', 'presets/*.json'],
    },
    include_package_data=True,
    python_requires='>=3.7',
    install_requires=[
        'click>=7.0',
        'click-default-group>=1.2',
        'Jinja2>=2.10',
        'pluggy>=0.7.1',
        'numpy>=1.20',
        'Pillow>=8.0',
    ],
    entry_points='''
        [console_scripts]
        combinet=combinet.cli:cli
    ''',
    setup_requires=['pytest-runner'],
    extras_require={
        'test': [
            'pytest>=6.0',
        ]
    },
    tests_require=[
        'combinet[test]',
    ],
    classifiers=[
        'Development Status :: 4 - Beta',
        'Intended Audience :: Developers',
        'Intended Audience :: Science/Research',
        'Topic :: Scientific/Engineering :: Image Recognition',
        'License :: OSI Approved :: Apache Software License',
        'Programming Language :: Python :: 3',
    ],
)

"""
This is a setup.py script for creating the mherlab package.
"""

from setuptools import setup, find_packages

setup(
    name='mherlab',
    version='1.0.0',
    packages=find_packages(exclude=['tests']),
    python_requires='>=3.9',
    install_requires=[
        'numpy>=1.22',
        'matplotlib>=3.5',
        'gymnasium>=0.29',
        'python-dotenv>=1.0.0',
        'python-json-logger>=2.0.7',
        'pyyaml>=6.0.1',
    ],
    entry_points={
        'console_scripts': [
            'mherlab=mherlab.cli:main',
            'mherlab-train=mherlab.main:main',
        ]
    },
    data_files=[
        ('.', ['.env.template', 'config.json']),
        ('docs', ['docs/cli.md', 'docs/file_formats.md', 'docs/checkpoint_format.md']),
    ],
)

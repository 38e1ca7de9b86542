from setuptools import find_packages, setup

setup(
    name="abnet",
    version="0.1.0",
    description="Adapter fine-tuning of frozen BERT backbones for sequence-to-sequence "
    "tasks, with Mask-Predict and beam-search decoding",
    packages=find_packages(exclude=["tests", "tests.*"]),
    install_requires=[
        "torch",
        "numpy",
        "click",
        "toml",
        "pyyaml",
        "rich",
        "tabulate",
        "psutil",
    ],
    extras_require={"test": ["pytest"]},
    entry_points={"console_scripts": ["abnet=abnet.cli:main"]},
)

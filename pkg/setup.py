"""Setup script for embroidery_lora package."""

from setuptools import setup, find_packages

# Read the contents of README.md file
with open("README.md", encoding="utf-8") as f:
    long_description = f.read()

# Read requirements from requirements.txt
with open("requirements.txt", encoding="utf-8") as f:
    requirements = [
        line for line in f.read().splitlines() if line and not line.startswith("#")
    ]

setup(
    name="embroidery-lora",
    version="0.1.0",
    description="One-shot embroidery style adapters with block-wise style "
    "analysis and contrastive training",
    long_description=long_description,
    long_description_content_type="text/markdown",
    author="Embroidery LoRA contributors",
    packages=find_packages(exclude=["tests", "tests.*", "examples", "examples.*"]),
    package_data={"embroidery_lora": ["configs/*.yaml"]},
    install_requires=requirements,
    python_requires=">=3.9",
    classifiers=[
        "Development Status :: 3 - Alpha",
        "Intended Audience :: Science/Research",
        "License :: OSI Approved :: MIT License",
        "Programming Language :: Python :: 3",
        "Programming Language :: Python :: 3.9",
        "Programming Language :: Python :: 3.10",
        "Programming Language :: Python :: 3.11",
        "Topic :: Scientific/Engineering :: Artificial Intelligence",
    ],
    entry_points={
        "console_scripts": [
            "embroidery-lora=embroidery_lora.cli:main",
        ],
    },
    extras_require={
        "metrics": [
            "lpips>=0.1.4",
            "torchmetrics[multimodal]>=1.0.0",
        ],
        "hed": [
            "controlnet-aux>=0.0.7",
        ],
        "dev": [
            "black>=23.0.0",
            "flake8>=6.0.0",
            "mypy>=1.0.0",
            "pytest>=7.0.0",
            "pytest-cov>=4.0.0",
            "pre-commit>=3.0.0",
        ],
    },
    include_package_data=True,
)

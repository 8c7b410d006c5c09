from setuptools import setup, find_packages

setup(
    name="stadv-traffic",
    version="0.1.0",
    description="Adversarial attacks, defenses and robustness bounds for spatiotemporal traffic forecasting",
    author="Champion",
    packages=find_packages(where="src"),
    package_dir={"": "src"},
    install_requires=[
        "numpy>=1.24.0",
        "pandas>=2.0.0",
        "pillow>=10.2.0",
        "pyyaml>=6.0.1",
        "python-dotenv>=1.0.1",
        "psutil>=5.9.8",
    ],
    python_requires=">=3.8",
    entry_points={
        "console_scripts": [
            "stadv=stadv.main:main",
        ],
    },
)

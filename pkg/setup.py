import setuptools

with open("README.md", "r") as fh:
    long_description = fh.read()

setuptools.setup(
    name="ArcGemRetrieval",
    version="1.0.0",
    author="AdamantLife",
    author_email="contact.adamantmedia@gmail.com",
    description="Desk-scale landmark retrieval: GeM pooling, arcmargin training with progressive resolutions, and mAP@100 evaluation",
    long_description=long_description,
    long_description_content_type="text/markdown",
    url="https://github.com/AdamantLife/ArcGemRetrieval",
    packages=setuptools.find_packages(exclude=["tests", "tests.*"]),
    classifiers=[
        "Programming Language :: Python :: 3",
        "License :: OSI Approved :: GNU General Public License v3 (GPLv3)",
        "Operating System :: OS Independent",
    ],
    python_requires='>=3.8',

    install_requires = [
        "pillow",
        "click",
        "numpy",
        ],
    extras_require = {
        "tests": ["hypothesis"],
        },
    entry_points = {
        "console_scripts": ["arcgem = ArcGemRetrieval.cli:run_command"],
        },
)

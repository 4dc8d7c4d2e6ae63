# This file makes the signbert directory a Python package

__version__ = "0.1.0"

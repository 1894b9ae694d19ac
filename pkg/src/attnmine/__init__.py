"""Weakly supervised disease-pattern localization mining toolkit."""

__version__ = "0.1.0"

"""Radiologist-positive classification and radiologist/ML decision fusion."""

__version__ = "0.1.0"

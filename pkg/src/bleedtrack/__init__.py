"""Bleeding onset detection, source-point localization and point tracking for endoscopic video."""

__version__ = "0.1.0"

"""Morphing and data assimilation toolkit for patient-specific vascular flow surrogates."""

__version__ = "0.1.0"

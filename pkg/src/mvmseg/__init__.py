"""Myocardium segmentation and velocity analysis on phase-contrast cine phantoms, numpy only."""

__version__ = "0.1.0"

"""Unsupervised coating-defect inspection for circular laser power-meter sensors.

Density of defect-free coating appearance is learned with per-scale
normalizing flows; low-likelihood regions are reported as defects.
"""

__version__ = "0.1.0"

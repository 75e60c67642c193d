"""Geodesic tomography, Gaussian-beam quasimodes, and DN-map inversion on 2D disks."""

__version__ = "0.1.0"

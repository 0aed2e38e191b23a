"""Uniform shear flow solver for the spatially homogeneous Boltzmann equation."""
__version__ = "0.1.0"

"""Simulator for quantum-processing-enhanced imaging of two point sources."""

__version__ = "0.1.0"

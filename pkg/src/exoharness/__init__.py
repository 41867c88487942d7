"""Simulation and impedance optimization of lower-limb exoskeleton harnesses."""

__version__ = "0.1.0"

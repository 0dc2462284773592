"""Receptive-field transfer of rotation-invariant local 3D features."""

__version__ = "0.1.0"

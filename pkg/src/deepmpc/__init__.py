"""Tube MPC with a neuro-adaptive outer layer for control-affine systems."""

__version__ = "0.1.0"

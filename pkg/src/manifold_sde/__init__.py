"""Diffusions on manifolds observed only through point clouds."""
__version__ = "0.1.0"

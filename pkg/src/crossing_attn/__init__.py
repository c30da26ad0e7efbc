"""Intersection classification from a third-person view, ego-motion from a first-person view, and their fusion."""

from crossing_attn.kernels import BACKEND

__all__ = ["BACKEND"]
__version__ = "0.1.0"

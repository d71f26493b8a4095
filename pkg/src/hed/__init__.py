"""Deeply supervised multi-scale edge detection on a small numpy autograd engine."""

__version__ = "0.1.0"

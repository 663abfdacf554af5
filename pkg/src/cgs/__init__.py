"""Collaborative generalist and specialists (CGS) for multi-target
semi-supervised segmentation, implemented on a small numpy autodiff core."""

__version__ = "0.1.0"

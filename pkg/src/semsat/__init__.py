"""Semantic radiance fields for multi-date satellite imagery, built on a small numpy autodiff core."""

__version__ = "0.1.0"

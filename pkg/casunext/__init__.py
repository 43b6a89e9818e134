"""CasUNext: coarse-to-fine brain segmentation on a numpy autodiff core."""

__version__ = "0.1.0"

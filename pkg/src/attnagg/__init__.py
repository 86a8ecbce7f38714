"""Multi-scale visual attention aggregation for imbalanced multi-label
attribute classification, built on a small from-scratch autodiff engine."""

from attnagg import _env  # noqa: F401  (pins BLAS threads before numpy loads)

__version__ = "0.1.0"

"""Thermal-only novel view synthesis toolkit.

Single-channel image stabilization and contrast enhancement, dataset
diagnostics, and a differentiable scalar-emission Gaussian splatting
engine with per-frame / per-Gaussian appearance embeddings.
"""

__version__ = "0.1.0"

from .imaging import Frame, Sequence, Cdf, MonotoneLut  # noqa: F401

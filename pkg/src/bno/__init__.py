"""Koopman-plus-convolution operator learning for spatiotemporal fields.

Submodules: ``linalg`` (dense kernels), ``dmd`` (exact DMD and the Koopman
forecast), ``neural`` (convolutions, loss, Adam), ``model`` (Banach layers,
BNO and baselines), ``data`` (fields, windows, synthetic generator),
``train``, ``evalx`` (evaluation protocols), ``checkpoint`` and ``cli``.
"""
from .errors import BnoError

__version__ = "0.1.0"

__all__ = ["BnoError", "__version__"]

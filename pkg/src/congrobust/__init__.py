"""Congestion predictors, routing-invariant placement attacks and adversarial training on synthetic layouts."""

__version__ = "0.1.0"

from . import kernels  # noqa: E402,F401  (selects the kernel backend once)

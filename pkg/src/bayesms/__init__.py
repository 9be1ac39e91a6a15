"""Residual-driven Bayesian selection of multiscale basis functions."""

from importlib.metadata import PackageNotFoundError, version

try:
    __version__ = version("artifact")
except PackageNotFoundError:        # running from a source tree
    __version__ = "0.1.0"

__all__ = ["__version__"]

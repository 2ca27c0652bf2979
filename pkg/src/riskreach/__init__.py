"""CVaR-constrained TD3 navigation with Taylor-model action reachability."""

from .kernels import BACKEND

__version__ = "0.1.0"
__all__ = ["BACKEND", "__version__"]

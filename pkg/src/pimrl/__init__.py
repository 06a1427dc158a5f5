"""Physics-informed multi-scale recurrent learning (PIMRL) on periodic grids."""
from .kernels import BACKEND

__version__ = "0.1.0"
__all__ = ["BACKEND", "__version__"]

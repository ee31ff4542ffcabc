"""Joint neural-SDF / 3D Gaussian splatting surface reconstruction, desk scale."""

__version__ = "0.1.0"

from .autodiff import Tape, Value, forward_op, grad_check

__all__ = ["Tape", "Value", "forward_op", "grad_check", "__version__"]

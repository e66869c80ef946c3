"""AdaFuse: adaptive multi-modal image fusion with spatial-frequential
cross attention, built on a self-contained reverse-mode autodiff engine."""

from .config import default_dtype, set_default_dtype, using_dtype
from .tensor import Tensor, finite_difference_grad, no_grad

__version__ = "0.1.0"

__all__ = [
    "Tensor",
    "default_dtype",
    "set_default_dtype",
    "using_dtype",
    "finite_difference_grad",
    "no_grad",
    "__version__",
]

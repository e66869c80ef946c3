"""Global numeric configuration.

Training defaults to float32; the gradient-check and oracle test suites
switch to float64 so central differences are meaningful.
"""

from contextlib import contextmanager

import numpy as np

_DTYPE = np.float32

_NAMES = {"float32": np.float32, "float64": np.float64}


def default_dtype():
    return _DTYPE


def set_default_dtype(dtype):
    """Set the global compute precision ('float32' or 'float64')."""
    global _DTYPE
    if isinstance(dtype, str):
        if dtype not in _NAMES:
            raise ValueError(f"unknown dtype {dtype!r}")
        dtype = _NAMES[dtype]
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _DTYPE = dtype


@contextmanager
def using_dtype(dtype):
    prev = _DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(prev)

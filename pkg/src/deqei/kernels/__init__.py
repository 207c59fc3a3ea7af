"""Convolution kernels with a compiled core and a numpy fallback.

The extension is used when it imports and ``DEQEI_PURE_PYTHON`` is unset.
``BACKEND`` names the active implementation.
"""

import os

from . import _pykernels as python_backend

compiled_backend = None
if os.environ.get("DEQEI_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels as compiled_backend
    except ImportError:  # extension not built
        compiled_backend = None

_impl = compiled_backend if compiled_backend is not None else python_backend
BACKEND = "cython" if compiled_backend is not None else "python"

conv2d_forward = _impl.conv2d_forward
conv2d_backward_input = _impl.conv2d_backward_input
conv2d_backward_weight = _impl.conv2d_backward_weight

__all__ = [
    "BACKEND",
    "compiled_backend",
    "python_backend",
    "conv2d_forward",
    "conv2d_backward_input",
    "conv2d_backward_weight",
]

"""Hot-loop kernels, compiled when available.

The Cython build (``_ckernels``) is used when importable; otherwise, or when
``UDET_KERNELS=python`` is set, the numpy fallback (``_pykernels``) is used.
Both expose the same functions.
"""
import os

from . import _pykernels as python_backend

try:
    from . import _ckernels as compiled_backend
except ImportError:  # extension not built
    compiled_backend = None

if compiled_backend is not None and os.environ.get("UDET_KERNELS", "").lower() != "python":
    backend = compiled_backend
    BACKEND_NAME = "cython"
else:
    backend = python_backend
    BACKEND_NAME = "python"

im2col = backend.im2col
col2im = backend.col2im
depthwise_forward = backend.depthwise_forward
depthwise_backward = backend.depthwise_backward
maxpool2x2_forward = backend.maxpool2x2_forward
maxpool2x2_backward = backend.maxpool2x2_backward
mish_forward = backend.mish_forward
mish_backward = backend.mish_backward

__all__ = [
    "BACKEND_NAME",
    "backend",
    "compiled_backend",
    "python_backend",
    "im2col",
    "col2im",
    "depthwise_forward",
    "depthwise_backward",
    "maxpool2x2_forward",
    "maxpool2x2_backward",
    "mish_forward",
    "mish_backward",
]

"""U-Det: U-Net with a bidirectional feature pyramid bridge for lung-nodule segmentation.

A self-contained numpy engine: tensors with reverse-mode autodiff, the layer
primitives, the model variants, weighted BCE training and evaluation.
"""
__version__ = "0.1.0"

from .model import VARIANTS, ModelGraph, audit_parameters, build, forward  # noqa: E402
from .tensor import Parameter, Tensor, backward, no_grad, precision  # noqa: E402

__all__ = [
    "VARIANTS", "ModelGraph", "Parameter", "Tensor", "audit_parameters", "backward", "build",
    "forward", "no_grad", "precision", "__version__",
]

"""Brain-tumor segmentation network with VAE regularization, in numpy.

The package covers a small reverse-mode autodiff engine, the network's
operators and architecture, its three-term loss, Adam training, flip
test-time augmentation with ensembling, and BraTS-style metrics.
"""

from .autodiff import Tensor, backward, grad_check
from .model import Model, ModelConfig, build_model, forward, forward_seg_only, infer_shapes

__all__ = ["Tensor", "backward", "grad_check", "Model", "ModelConfig", "build_model",
           "forward", "forward_seg_only", "infer_shapes"]
__version__ = "0.1.0"

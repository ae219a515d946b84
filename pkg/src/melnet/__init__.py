"""Two-scale single-stage object detector built on a self-contained autodiff core.

Subsystems: ``autograd`` (tensors and gradients), ``kernels`` (compiled or
NumPy convolution paths), ``architecture`` (layer specs and the network),
``boxes`` (codec, IoU, NMS), ``anchors`` (dimension clustering), ``kitti``
(label parsing and conversion), ``augment`` (box-aware transforms),
``training`` (loss, Adam, loop), ``evaluation`` (AP/mAP), ``cli``.
"""

from .autograd import Tensor, grad_check, no_grad
from .kernels import HAS_COMPILED, backend_name

__version__ = "0.1.0"

__all__ = ["Tensor", "grad_check", "no_grad", "HAS_COMPILED", "backend_name", "__version__"]

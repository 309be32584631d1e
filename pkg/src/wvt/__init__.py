"""Window-enhanced video transformer for dense-scene action detection.

A self-contained stack: numpy-backed tensors with reverse-mode autodiff,
hand-built 3-D convolution kernels, a local-relation conv branch and
window-enhanced attention on a ViT backbone, an RoI multi-label detection
head, frame-mAP evaluation, and a deterministic synthetic clip benchmark.
"""

from .tensor import Tensor, backward, no_grad
from .errors import (WvtError, DimensionError, ConfigError, InputError,
                     ParseError, NumericError)
from .model import ModelConfig, VideoModel, PRESETS
from .head import Detector

__version__ = "0.1.0"

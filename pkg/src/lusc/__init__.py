"""AlexNet vs Vision Transformer benchmark harness for land-use scene classification."""

from .alexnet import AlexNetConfig, build_alexnet
from .autodiff import Tensor, backward, no_grad
from .data import AugmentationPolicy, DatasetArchive, SplitSpec, import_dataset, load_archive, pack_archive, split
from .metrics import confusion, evaluate, metrics
from .training import TrainConfig, cross_entropy, fit, load_checkpoint, save_checkpoint
from .vit import ViTConfig, build_vit, vit_b16, vit_tiny

__version__ = "0.1.0"

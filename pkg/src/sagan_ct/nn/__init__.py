"""A small numpy autodiff engine with the layers the denoiser needs."""

from . import functional
from .checkpoint import CheckpointError, load_checkpoint, module_entries, restore_module, save_checkpoint
from .functional import (
    batch_norm2d,
    concat_channels,
    conv2d,
    conv_transpose2d,
    l1_loss,
    leaky_relu,
    lsgan_loss,
    mse_loss,
    relu,
    residual_add,
    sigmoid,
    tanh,
)
from .layers import BatchNorm2d, Conv2d, ConvTranspose2d, Module, Param, recompute_batchnorm_stats
from .optim import AdamConfig, NonFiniteError, adam_step
from .tensor import Tensor

__all__ = [
    "AdamConfig",
    "BatchNorm2d",
    "CheckpointError",
    "Conv2d",
    "ConvTranspose2d",
    "Module",
    "NonFiniteError",
    "Param",
    "Tensor",
    "adam_step",
    "batch_norm2d",
    "concat_channels",
    "conv2d",
    "conv_transpose2d",
    "functional",
    "l1_loss",
    "leaky_relu",
    "load_checkpoint",
    "lsgan_loss",
    "module_entries",
    "mse_loss",
    "recompute_batchnorm_stats",
    "relu",
    "residual_add",
    "restore_module",
    "save_checkpoint",
    "sigmoid",
    "tanh",
]

"""Pyramid non-local enhanced networks on numpy with a small reverse-mode autodiff."""

from .backbone import DrbBlock, ModelConfig, PnenModel, drb_forward, full_size_config, pnen_forward, pnen_loss
from .config import RunConfig, load_config, parse_config
from .costs import CostReport, count_costs
from .errors import ConfigError, DataError, NumericError, PnenError
from .filters import FilterSpec, apply_filter
from .io import load_checkpoint, read_image, read_tensor, save_checkpoint, write_image, write_tensor
from .layers import BatchNormLayer, ConvLayer, Module
from .metrics import QualityScore, psnr, ssim
from .nonlocal_blocks import (
    AsymmetricPyramidBlock,
    NonLocalBlock,
    PyramidNonLocalBlock,
    apnb_forward,
    dump_attention,
    nlb_forward,
    pnb_forward,
)
from .tensor import Tape, Tensor
from .training import TrainResult, adam_step, lr_schedule, train

__all__ = [
    "AsymmetricPyramidBlock",
    "BatchNormLayer",
    "ConfigError",
    "ConvLayer",
    "CostReport",
    "DataError",
    "DrbBlock",
    "FilterSpec",
    "ModelConfig",
    "Module",
    "NonLocalBlock",
    "NumericError",
    "PnenError",
    "PnenModel",
    "PyramidNonLocalBlock",
    "QualityScore",
    "RunConfig",
    "Tape",
    "Tensor",
    "TrainResult",
    "adam_step",
    "apnb_forward",
    "apply_filter",
    "count_costs",
    "drb_forward",
    "dump_attention",
    "load_checkpoint",
    "load_config",
    "lr_schedule",
    "nlb_forward",
    "full_size_config",
    "parse_config",
    "pnb_forward",
    "pnen_forward",
    "pnen_loss",
    "psnr",
    "read_image",
    "read_tensor",
    "save_checkpoint",
    "ssim",
    "train",
    "write_image",
    "write_tensor",
]

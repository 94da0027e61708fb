"""Dual-encoder (windowed attention + selective scan) cardiac segmentation on a numpy autograd core."""

from .data import SegSample, generate_dataset, read_dataset, write_dataset
from .errors import (ConfigurationError, ContractError, DimensionError, FormatError, NumericError,
                     SambaError)
from .metrics import MetricReport, evaluate_masks
from .model import PRESETS, NetConfig, SambaUNet, parameter_census
from .tensor import Tensor, no_grad
from .train import TrainConfig, ablate, evaluate, train

__all__ = [
    "ConfigurationError", "ContractError", "DimensionError", "FormatError", "MetricReport",
    "NetConfig", "NumericError", "PRESETS", "SambaError", "SambaUNet", "SegSample", "Tensor",
    "TrainConfig", "ablate", "evaluate", "evaluate_masks", "generate_dataset", "no_grad",
    "parameter_census", "read_dataset", "train", "write_dataset",
]

__version__ = "0.1.0"

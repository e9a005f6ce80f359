"""CoDA nets in numpy: convolutional networks built from dynamic alignment units.

These networks compute ``W(x) x`` with a norm-bounded, input-dependent
matrix ``W``, so every logit decomposes exactly into per-input contributions.
"""

__version__ = "0.1.0"

from . import tensor
from .dau import DauBank, DauParams, RescaleKind, dau_forward, dau_weight_materialize, edau_forward
from .data import LabeledImageSet, load_cifar_binary, load_idx, mnist_subset, split_train_val
from .decomposition import LinearDecomposition, SpatialContributionMap, baseline_attributions, effective_row
from .errors import CodaError, ConfigurationError, ContractError, DimensionError, ParseError, TrainingError
from .net import CodaConvLayer, CodaNet, NetConfig, build_coda_net, build_hybrid, loss
from .serialization import load_model, save_model
from .tensor import Tensor
from .training import TrainConfig, train

__all__ = [
    "tensor", "Tensor",
    "DauBank", "DauParams", "RescaleKind", "dau_forward", "dau_weight_materialize", "edau_forward",
    "LabeledImageSet", "load_cifar_binary", "load_idx", "mnist_subset", "split_train_val",
    "LinearDecomposition", "SpatialContributionMap", "baseline_attributions", "effective_row",
    "CodaError", "ConfigurationError", "ContractError", "DimensionError", "ParseError", "TrainingError",
    "CodaConvLayer", "CodaNet", "NetConfig", "build_coda_net", "build_hybrid", "loss",
    "load_model", "save_model",
    "TrainConfig", "train",
]

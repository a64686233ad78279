"""Forensic CNN engine: adaptive trace extraction, the detector family,
its training recipe, and the post-processing robustness protocol."""

__version__ = "0.1.0"

from .errors import (
    AmtennetError,
    CheckpointError,
    DataError,
    NumericalError,
    ShapeError,
)
from .extractors import (
    AmtenExtractor,
    ConstrainedConvExtractor,
    ExtractorConfig,
    FixedBankExtractor,
    IdentityExtractor,
    TraceWiring,
    build_extractor,
    build_variant,
)
from .gradcheck import gradient_check
from .models import ModelGraph, build_ablation, build_amtennet, build_mini
from .optim import TrainConfig, lr_at, sgd_step
from .tensor import BatchNormParams, ConvParams, Param, Tensor
from .training import fit, load_checkpoint, save_checkpoint

__all__ = [
    "__version__",
    "AmtennetError", "CheckpointError", "DataError", "NumericalError", "ShapeError",
    "AmtenExtractor", "ConstrainedConvExtractor", "ExtractorConfig", "FixedBankExtractor",
    "IdentityExtractor", "TraceWiring", "build_extractor", "build_variant",
    "gradient_check",
    "ModelGraph", "build_ablation", "build_amtennet", "build_mini",
    "TrainConfig", "lr_at", "sgd_step",
    "BatchNormParams", "ConvParams", "Param", "Tensor",
    "fit", "load_checkpoint", "save_checkpoint",
]

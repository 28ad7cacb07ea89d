"""Attribute-aware attentional feature fusion for desk-scale face verification.

A self-contained numpy-backed autograd engine, a two-branch convolutional
network whose recognition and attribute feature maps are blended by a
channel+spatial attention gate, staged training, verification metrics and
a CLI for running the experiment grids.
"""

from .config import RunConfig
from .datagen import Dataset, Sample, SyntheticSpec, generate, load_dataset, make_pairs
from .errors import (
    ConfigError,
    DivergenceError,
    ProtocolError,
    StagingError,
    WeightFileError,
)
from .evaluation import (
    PairProtocol,
    TarPoint,
    VerificationReport,
    attribute_accuracy,
    score_pairs,
    tar_at_far,
    verification_report,
)
from .fusion import (
    AttentionWeights,
    DualAttentionFusion,
    FusionConfig,
    make_fusion,
)
from .network import (
    AttributeSpec,
    BranchOutputs,
    MultiBranchModel,
    NetworkConfig,
    cosine_similarity,
    sb_loss,
    total_loss,
)
from .tensor import GraphError, ShapeError, Tensor, no_grad
from .training import TrainConfig, TrainLog, lr_at, run_all, run_stage
from .weights import load_into_model, load_weights, save_weights

__version__ = "0.1.0"

__all__ = [
    "AttentionWeights", "AttributeSpec", "BranchOutputs", "ConfigError",
    "Dataset", "DivergenceError", "DualAttentionFusion", "FusionConfig",
    "GraphError", "MultiBranchModel", "NetworkConfig", "PairProtocol",
    "ProtocolError", "RunConfig", "Sample", "ShapeError", "StagingError",
    "SyntheticSpec", "TarPoint", "Tensor", "TrainConfig", "TrainLog",
    "VerificationReport", "WeightFileError", "attribute_accuracy",
    "cosine_similarity", "generate", "load_dataset", "load_into_model",
    "load_weights", "lr_at", "make_fusion", "make_pairs", "no_grad",
    "run_all", "run_stage", "save_weights", "sb_loss", "score_pairs",
    "tar_at_far", "total_loss", "verification_report",
]

"""Parkinsonian finger-tapping classification from hand keypoints with an
adaptive spatio-temporal graph network trained from positive and unlabeled
labels."""

__version__ = "0.1.0"

from .autodiff import NumericError, ShapeError, Tensor, Tape  # noqa: E402
from .data import KeypointSequence, SynthConfig, generate_synthetic, parse_keypoint_file  # noqa: E402
from .graph import build_hand_graph, partition_adjacency  # noqa: E402
from .network import ModelConfig  # noqa: E402
from .risk import RiskConfig, risk_pn, risk_pu  # noqa: E402
from .training import TrainConfig, load_checkpoint, save_checkpoint, train_stream  # noqa: E402

__all__ = [
    "KeypointSequence", "ModelConfig", "NumericError", "RiskConfig", "ShapeError", "SynthConfig",
    "Tape", "Tensor", "TrainConfig", "build_hand_graph", "generate_synthetic", "load_checkpoint",
    "parse_keypoint_file", "partition_adjacency", "risk_pn", "risk_pu", "save_checkpoint",
    "train_stream",
]

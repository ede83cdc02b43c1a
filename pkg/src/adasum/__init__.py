"""Adaptive summation of gradients for data-parallel training, simulated on one machine."""

from .combiner import (
    LayerLayout,
    adasum_linear,
    adasum_pair,
    adasum_tree,
    expected_combined,
    lemma_checks,
    orthogonality,
)
from .collective import adasum_rvh, hierarchical_adasum, run_ranks, sum_rvh
from .errors import (
    AdasumError,
    ConfigError,
    ConsistencyError,
    NumericError,
    ProtocolError,
    ShapeError,
    TransportError,
)
from .estimator import AdasumClassifier
from .precision import ScaleState
from .training import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "AdasumClassifier",
    "AdasumError",
    "ConfigError",
    "ConsistencyError",
    "LayerLayout",
    "NumericError",
    "ProtocolError",
    "ScaleState",
    "ShapeError",
    "TrainConfig",
    "TransportError",
    "adasum_linear",
    "adasum_pair",
    "adasum_rvh",
    "adasum_tree",
    "expected_combined",
    "hierarchical_adasum",
    "lemma_checks",
    "orthogonality",
    "run_ranks",
    "sum_rvh",
    "train",
]

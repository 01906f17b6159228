"""Decentralized multi-agent natural actor-critic algorithms with consensus critics."""

from .algorithms import AlgorithmKind, StepSchedule, TrainConfig, step_sizes, train
from .env_abstract import AbstractMdp, generate
from .env_traffic import TrafficNet
from ._kernels import HAVE_NUMBA

__version__ = "0.1.0"

__all__ = ["AlgorithmKind", "StepSchedule", "TrainConfig", "step_sizes", "train", "AbstractMdp", "generate",
           "TrafficNet", "HAVE_NUMBA", "__version__"]

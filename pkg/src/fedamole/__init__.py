"""Federated fine-tuning with heterogeneous mixtures of LoRA experts.

A numpy-only reference implementation: a small autodiff engine, a frozen
decoder backbone, HMoLE adapters, reverse-selection expert assignment,
embedding privatisation and a round-based federated simulator.
"""

from .config import ExperimentConfig, parse_config
from .errors import ConfigError, FeasibilityError, ProtocolError
from .fedsim import Federation, run_training

__all__ = [
    "ExperimentConfig",
    "parse_config",
    "ConfigError",
    "FeasibilityError",
    "ProtocolError",
    "Federation",
    "run_training",
]
__version__ = "0.1.0"

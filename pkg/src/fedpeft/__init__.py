"""Federated parameter-efficient fine-tuning of small vision transformers, on numpy."""

from .errors import (AggregationError, ConfigError, ContractError, DimensionError, FedPeftError,
                     MetricError, NonFiniteError, NumericalError, ProtocolError, RankError,
                     TrainingError)
from .federation import FederationConfig, FedSetup, run_federation, run_warm_start_scenario
from .peft import PeftConfig, StrategyId, parse_strategy
from .rng import Rng
from .vit import VitConfig

__version__ = "0.1.0"

__all__ = [
    "AggregationError", "ConfigError", "ContractError", "DimensionError", "FedPeftError",
    "MetricError", "NonFiniteError", "NumericalError", "ProtocolError", "RankError",
    "TrainingError", "FederationConfig", "FedSetup", "run_federation", "run_warm_start_scenario",
    "PeftConfig", "StrategyId", "parse_strategy", "Rng", "VitConfig", "__version__",
]

"""Desk-scale federated DP-LoRA simulator.

Modules:

- ``numerics``: deterministic matrix kernels, seeded streams, linear-layer passes.
- ``lora``: adapters on frozen layers, analytic gradients, checkpoints.
- ``privacy``: clipping, Gaussian noise, calibration, sequential and moments accountants.
- ``federation``: broadcast / node update / weighted aggregation rounds and a FedAvg baseline.
- ``datagen``: synthetic clustered data and node partitions.
- ``ledger``: exact parameter and communication counts.
- ``config`` / ``cli``: run configuration and the ``dplora`` command.
"""

from .config import TrainConfig, parse_config
from .datagen import Dataset, Partition, make_synthetic, partition
from .errors import (
    AccountantInapplicable,
    ConfigError,
    NumericalError,
    ParameterError,
    ProtocolError,
    ShapeError,
)
from .federation import (
    NodeState,
    RoundRecord,
    RunResult,
    aggregate,
    broadcast,
    node_update,
    run_federated,
    run_fedavg_baseline,
)
from .ledger import ModelShape, OverheadReport, attention_param_count, lora_overhead, reduction_ratio
from .lora import LoraAdapter, LoraLayer, LoraModel, lora_forward, lora_gradients, lora_param_count
from .numerics import Rng, frobenius_norm, gaussian_sample, linear_backward, linear_forward, matmul
from .privacy import (
    PrivacyParams,
    PrivacySpent,
    clip_gradient,
    gaussian_mechanism,
    moments_alpha,
    moments_epsilon,
    rho_bar,
    sequential_composition,
    sigma_calibrate_formula,
    sigma_calibrate_numeric,
    sigma_single_step,
)

__version__ = "0.1.0"

__all__ = [
    "AccountantInapplicable", "ConfigError", "NumericalError", "ParameterError", "ProtocolError", "ShapeError",
    "Dataset", "Partition", "make_synthetic", "partition",
    "NodeState", "RoundRecord", "RunResult", "aggregate", "broadcast", "node_update",
    "run_federated", "run_fedavg_baseline",
    "ModelShape", "OverheadReport", "attention_param_count", "lora_overhead", "reduction_ratio",
    "LoraAdapter", "LoraLayer", "LoraModel", "lora_forward", "lora_gradients", "lora_param_count",
    "Rng", "frobenius_norm", "gaussian_sample", "linear_backward", "linear_forward", "matmul",
    "PrivacyParams", "PrivacySpent", "clip_gradient", "gaussian_mechanism", "moments_alpha",
    "moments_epsilon", "rho_bar", "sequential_composition", "sigma_calibrate_formula",
    "sigma_calibrate_numeric", "sigma_single_step",
    "TrainConfig", "parse_config",
]

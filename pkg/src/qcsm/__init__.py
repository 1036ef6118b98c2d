"""Deterministic simulator for QoS management of heterogeneous IoT fleets.

The package wires five layers together: a shared domain model, a sensor
fleet, a protocol-adaptation gateway with a JSON data pool, a tabular
Q-learning engine over service-to-class assignments, and a scenario
harness that reproduces the response-time, battery-lifetime, and
training-reward experiments at desk scale.
"""

from .errors import (
    ConfigError,
    ContractViolation,
    DecodeError,
    DensityUndefined,
    NotTrained,
    QcsmError,
    UnsupportedItem,
)
from .model import (
    CostModel,
    DeviceClass,
    Encoding,
    Protocol,
    QosClass,
    QosClassId,
    ScenarioConfig,
    ServiceSpec,
    Transport,
    build_scenario,
    canonical_json,
    config_hash,
)

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "ContractViolation",
    "CostModel",
    "DecodeError",
    "DensityUndefined",
    "DeviceClass",
    "Encoding",
    "NotTrained",
    "Protocol",
    "QcsmError",
    "QosClass",
    "QosClassId",
    "ScenarioConfig",
    "ServiceSpec",
    "Transport",
    "UnsupportedItem",
    "build_scenario",
    "canonical_json",
    "config_hash",
    "__version__",
]

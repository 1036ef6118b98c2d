"""Shared domain vocabulary and scenario configuration.

Everything downstream (fleet, gateway, learning engine, harness, CLI)
builds on the value types defined here. All of them are immutable and
JSON round-trippable; a scenario is content-addressed by the SHA-256 of
its canonical JSON form.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Iterable, Mapping, Sequence

from .errors import ConfigError


class Protocol(str, Enum):
    COAP = "CoAP"
    HTTP = "HTTP"
    MQTT = "MQTT"


class Transport(str, Enum):
    UDP = "UDP"
    TCP = "TCP"


class Encoding(str, Enum):
    JSON = "JSON"
    CBOR = "CBOR"


class QosClassId(str, Enum):
    DELAY_SENSITIVE = "DelaySensitive"
    DELAY_TOLERANT = "DelayTolerant"


# Application protocols ride on a fixed transport and emit a fixed wire
# encoding. CoAP and MQTT devices speak binary; HTTP devices speak JSON.
PROTOCOL_TRANSPORT: Mapping[Protocol, Transport] = {
    Protocol.COAP: Transport.UDP,
    Protocol.HTTP: Transport.TCP,
    Protocol.MQTT: Transport.TCP,
}

PROTOCOL_ENCODING: Mapping[Protocol, Encoding] = {
    Protocol.COAP: Encoding.CBOR,
    Protocol.HTTP: Encoding.JSON,
    Protocol.MQTT: Encoding.CBOR,
}


@dataclass(frozen=True, slots=True)
class DeviceClass:
    """A constrained-device capability tier.

    `max_payload_bytes` caps a single report on the wire; only the
    largest tier can host a full server stack on the node itself.
    """

    tier: int
    max_payload_bytes: int
    supports_server_stack: bool

    def validate(self) -> None:
        if self.tier < 0:
            raise ConfigError(f"device class tier must be >= 0, got {self.tier}")
        if self.max_payload_bytes <= 0:
            raise ConfigError("device class payload cap must be positive")


DEFAULT_DEVICE_CLASSES: tuple[DeviceClass, ...] = (
    DeviceClass(tier=0, max_payload_bytes=64, supports_server_stack=False),
    DeviceClass(tier=1, max_payload_bytes=256, supports_server_stack=False),
    DeviceClass(tier=2, max_payload_bytes=1024, supports_server_stack=True),
)


@dataclass(frozen=True, slots=True)
class ServiceSpec:
    """A service and the KPI envelope its consumers demand."""

    name: str
    max_delay_ms: float
    max_loss_rate: float
    protocol: Protocol

    def validate(self) -> None:
        if not self.name:
            raise ConfigError("service name must be non-empty")
        if self.max_delay_ms <= 0:
            raise ConfigError(f"{self.name}: max_delay_ms must be positive")
        if not 0.0 <= self.max_loss_rate <= 1.0:
            raise ConfigError(f"{self.name}: max_loss_rate must lie in [0, 1]")

    def to_dict(self) -> dict[str, Any]:
        return {
            "name": self.name,
            "max_delay_ms": self.max_delay_ms,
            "max_loss_rate": self.max_loss_rate,
            "protocol": self.protocol.value,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "ServiceSpec":
        _reject_unknown_keys(data, {"name", "max_delay_ms", "max_loss_rate", "protocol"}, "service")
        try:
            protocol = Protocol(data["protocol"])
        except (KeyError, ValueError) as exc:
            raise ConfigError(f"service protocol invalid: {data.get('protocol')!r}") from exc
        spec = cls(
            name=str(data["name"]),
            max_delay_ms=float(data["max_delay_ms"]),
            max_loss_rate=float(data["max_loss_rate"]),
            protocol=protocol,
        )
        spec.validate()
        return spec


# The built-in smart-city service catalog: name -> KPI envelope.
SERVICE_CATALOG: Mapping[str, ServiceSpec] = {
    "WindTurbine": ServiceSpec("WindTurbine", 300.0, 0.10, Protocol.COAP),
    "SolarPanel": ServiceSpec("SolarPanel", 300.0, 0.10, Protocol.HTTP),
    "Transportation": ServiceSpec("Transportation", 100.0, 0.05, Protocol.MQTT),
}

DEFAULT_SERVICE_PAIRS: Mapping[int, tuple[str, ...]] = {
    2: ("WindTurbine", "SolarPanel"),
    3: ("WindTurbine", "SolarPanel", "Transportation"),
}


@dataclass(frozen=True, slots=True)
class QosClass:
    """A reporting class: how often members report and how many are served per cycle."""

    class_id: QosClassId
    index: int
    reporting_interval_ms: float
    service_capacity_per_cycle: int

    def interval_cycles(self, cycle_ms: float) -> int:
        return max(1, round(self.reporting_interval_ms / cycle_ms))

    def validate(self, cycle_ms: float) -> None:
        if self.index < 1:
            raise ConfigError("QoS class index must be >= 1")
        if self.reporting_interval_ms < cycle_ms:
            raise ConfigError("reporting interval must be at least one cycle")
        if abs(self.reporting_interval_ms % cycle_ms) > 1e-9:
            raise ConfigError("reporting interval must be a whole number of cycles")
        if self.service_capacity_per_cycle < 1:
            raise ConfigError("class service capacity must be >= 1")

    def to_dict(self) -> dict[str, Any]:
        return {
            "class_id": self.class_id.value,
            "index": self.index,
            "reporting_interval_ms": self.reporting_interval_ms,
            "service_capacity_per_cycle": self.service_capacity_per_cycle,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "QosClass":
        _reject_unknown_keys(
            data,
            {"class_id", "index", "reporting_interval_ms", "service_capacity_per_cycle"},
            "qos_class",
        )
        try:
            class_id = QosClassId(data["class_id"])
        except (KeyError, ValueError) as exc:
            raise ConfigError(f"QoS class id invalid: {data.get('class_id')!r}") from exc
        return cls(
            class_id=class_id,
            index=int(data["index"]),
            reporting_interval_ms=float(data["reporting_interval_ms"]),
            service_capacity_per_cycle=int(data["service_capacity_per_cycle"]),
        )


DEFAULT_QOS_CLASSES: tuple[QosClass, QosClass] = (
    QosClass(QosClassId.DELAY_SENSITIVE, index=1, reporting_interval_ms=100.0, service_capacity_per_cycle=50),
    QosClass(QosClassId.DELAY_TOLERANT, index=2, reporting_interval_ms=500.0, service_capacity_per_cycle=10),
)


@dataclass(frozen=True, slots=True)
class CostModel:
    """Per-document processing costs (milliseconds) at the gateway."""

    c_parse_json: float = 0.010
    c_parse_cbor: float = 0.008
    c_convert: float = 0.015
    c_query_base: float = 1.0

    def validate(self) -> None:
        for name in ("c_parse_json", "c_parse_cbor", "c_convert", "c_query_base"):
            if getattr(self, name) < 0:
                raise ConfigError(f"cost {name} must be non-negative")

    def to_dict(self) -> dict[str, Any]:
        return {
            "c_parse_json": self.c_parse_json,
            "c_parse_cbor": self.c_parse_cbor,
            "c_convert": self.c_convert,
            "c_query_base": self.c_query_base,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "CostModel":
        _reject_unknown_keys(
            data, {"c_parse_json", "c_parse_cbor", "c_convert", "c_query_base"}, "cost"
        )
        model = cls(**{k: float(v) for k, v in data.items()})
        model.validate()
        return model


@dataclass(frozen=True, slots=True)
class ScenarioConfig:
    """Complete, immutable description of one simulated deployment."""

    services: tuple[ServiceSpec, ...]
    num_sensors: int
    seed: int = 0
    sim_cycles: int = 12_000
    cycle_ms: float = 100.0
    churn_probability: float = 0.01
    request_rate: float = 2.5
    request_peak_rate: float = 3.25
    request_peak_cycles: int = 4_000
    datastore_window_s: float = 60.0
    k_drain: float = 7.5e-7
    w_kpi: float = 1.0
    w_energy: float = 4.0
    episodes: int = 10_000
    learning_rate: float = 0.07
    gamma: float = 0.99
    batch_size: int = 128
    qos_classes: tuple[QosClass, ...] = DEFAULT_QOS_CLASSES
    device_classes: tuple[DeviceClass, ...] = DEFAULT_DEVICE_CLASSES
    cost: CostModel = field(default_factory=CostModel)

    def validate(self, strict: bool = True) -> None:
        """Raise ConfigError on the first violated invariant.

        `strict` enforces the supported experiment envelope (2 or 3
        services); relaxed mode accepts any non-empty service list,
        which the unit fixtures use for single-service setups.
        """
        if strict and len(self.services) not in (2, 3):
            raise ConfigError(f"expected 2 or 3 services, got {len(self.services)}")
        if not self.services:
            raise ConfigError("at least one service is required")
        names = [s.name for s in self.services]
        if len(set(names)) != len(names):
            raise ConfigError(f"duplicate service names: {names}")
        protocols = [s.protocol for s in self.services]
        if len(set(protocols)) != len(protocols):
            raise ConfigError("services must use pairwise distinct protocols")
        for svc in self.services:
            svc.validate()
        if self.num_sensors < len(self.services):
            raise ConfigError(
                f"need at least one sensor per service: {self.num_sensors} < {len(self.services)}"
            )
        if self.sim_cycles < 1:
            raise ConfigError("sim_cycles must be >= 1")
        if self.cycle_ms <= 0:
            raise ConfigError("cycle_ms must be positive")
        if not 0.0 <= self.churn_probability <= 1.0:
            raise ConfigError("churn_probability must lie in [0, 1]")
        if self.request_rate < 0:
            raise ConfigError("request_rate must be non-negative")
        if self.request_peak_rate < 0:
            raise ConfigError("request_peak_rate must be non-negative")
        if self.request_peak_cycles < 0:
            raise ConfigError("request_peak_cycles must be non-negative")
        if self.datastore_window_s <= 0:
            raise ConfigError("datastore_window_s must be positive")
        if self.k_drain <= 0:
            raise ConfigError("k_drain must be positive")
        if self.w_kpi < 0 or self.w_energy < 0:
            raise ConfigError("reward weights must be non-negative")
        if self.episodes < 1:
            raise ConfigError("episodes must be >= 1")
        if not 0.0 < self.learning_rate <= 1.0:
            raise ConfigError("learning_rate must lie in (0, 1]")
        if not 0.0 <= self.gamma < 1.0:
            raise ConfigError("gamma must lie in [0, 1)")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if len(self.qos_classes) != 2:
            raise ConfigError("exactly two QoS classes are supported")
        ids = [q.class_id for q in self.qos_classes]
        if set(ids) != {QosClassId.DELAY_SENSITIVE, QosClassId.DELAY_TOLERANT}:
            raise ConfigError("QoS classes must be one DelaySensitive and one DelayTolerant")
        indices = sorted(q.index for q in self.qos_classes)
        if indices != [1, 2]:
            raise ConfigError(f"QoS class indices must be 1 and 2, got {indices}")
        for q in self.qos_classes:
            q.validate(self.cycle_ms)
        if not self.device_classes:
            raise ConfigError("at least one device class is required")
        tiers = [d.tier for d in self.device_classes]
        if len(set(tiers)) != len(tiers):
            raise ConfigError(f"duplicate device class tiers: {tiers}")
        for d in self.device_classes:
            d.validate()
        self.cost.validate()

    # Accessors kept on the config because every module needs them.

    def qos_class(self, class_id: QosClassId) -> QosClass:
        for q in self.qos_classes:
            if q.class_id == class_id:
                return q
        raise ConfigError(f"no such QoS class: {class_id}")

    def service(self, name: str) -> ServiceSpec:
        for s in self.services:
            if s.name == name:
                return s
        raise ConfigError(f"no such service: {name}")

    def service_index(self, name: str) -> int:
        for j, s in enumerate(self.services):
            if s.name == name:
                return j
        raise ConfigError(f"no such service: {name}")

    def to_dict(self) -> dict[str, Any]:
        return {
            "services": [s.to_dict() for s in self.services],
            "num_sensors": self.num_sensors,
            "seed": self.seed,
            "sim_cycles": self.sim_cycles,
            "cycle_ms": self.cycle_ms,
            "churn_probability": self.churn_probability,
            "request_rate": self.request_rate,
            "request_peak_rate": self.request_peak_rate,
            "request_peak_cycles": self.request_peak_cycles,
            "datastore_window_s": self.datastore_window_s,
            "k_drain": self.k_drain,
            "w_kpi": self.w_kpi,
            "w_energy": self.w_energy,
            "episodes": self.episodes,
            "learning_rate": self.learning_rate,
            "gamma": self.gamma,
            "batch_size": self.batch_size,
            "qos_classes": [q.to_dict() for q in self.qos_classes],
            "device_classes": [dataclasses.asdict(d) for d in self.device_classes],
            "cost": self.cost.to_dict(),
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any], strict: bool = True) -> "ScenarioConfig":
        allowed = {f.name for f in dataclasses.fields(cls)}
        _reject_unknown_keys(data, allowed, "scenario")
        if "services" not in data:
            raise ConfigError("scenario is missing required key 'services'")
        if "num_sensors" not in data:
            raise ConfigError("scenario is missing required key 'num_sensors'")
        kwargs: dict[str, Any] = {}
        kwargs["services"] = tuple(ServiceSpec.from_dict(s) for s in data["services"])
        kwargs["num_sensors"] = int(data["num_sensors"])
        for name in (
            "seed", "sim_cycles", "episodes", "batch_size", "request_peak_cycles",
        ):
            if name in data:
                kwargs[name] = int(data[name])
        for name in (
            "cycle_ms", "churn_probability", "request_rate", "request_peak_rate",
            "datastore_window_s", "k_drain", "w_kpi", "w_energy", "learning_rate", "gamma",
        ):
            if name in data:
                kwargs[name] = float(data[name])
        if "qos_classes" in data:
            kwargs["qos_classes"] = tuple(QosClass.from_dict(q) for q in data["qos_classes"])
        if "device_classes" in data:
            classes = []
            for d in data["device_classes"]:
                _reject_unknown_keys(
                    d, {"tier", "max_payload_bytes", "supports_server_stack"}, "device_class"
                )
                classes.append(
                    DeviceClass(
                        tier=int(d["tier"]),
                        max_payload_bytes=int(d["max_payload_bytes"]),
                        supports_server_stack=bool(d["supports_server_stack"]),
                    )
                )
            kwargs["device_classes"] = tuple(classes)
        if "cost" in data:
            kwargs["cost"] = CostModel.from_dict(data["cost"])
        config = cls(**kwargs)
        config.validate(strict=strict)
        return config

    def to_json(self) -> str:
        return canonical_json(self.to_dict())

    @classmethod
    def from_json(cls, text: str, strict: bool = True) -> "ScenarioConfig":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"scenario is not valid JSON: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("scenario JSON must be an object")
        return cls.from_dict(data, strict=strict)

    def replace(self, **changes: Any) -> "ScenarioConfig":
        return dataclasses.replace(self, **changes)


def _reject_unknown_keys(data: Mapping[str, Any], allowed: set[str], where: str) -> None:
    if not isinstance(data, Mapping):
        raise ConfigError(f"{where}: expected a JSON object, got {type(data).__name__}")
    unknown = sorted(set(data) - allowed)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")


def canonical_json(value: Any) -> str:
    """Canonical JSON text: sorted keys, no whitespace, raw unicode, no NaN."""
    return json.dumps(value, sort_keys=True, separators=(",", ":"), ensure_ascii=False, allow_nan=False)


def config_hash(config: ScenarioConfig) -> str:
    """Content address of a scenario: SHA-256 hex of its canonical JSON."""
    return hashlib.sha256(config.to_json().encode("utf-8")).hexdigest()


def build_scenario(
    services: Sequence[str] | Iterable[str],
    num_sensors: int,
    seed: int = 0,
    **overrides: Any,
) -> ScenarioConfig:
    """Assemble a validated scenario from catalog service names.

    Unknown names, duplicates, or a fleet too small to cover every
    service raise ConfigError. Keyword overrides replace any other
    config field and are re-validated.
    """
    names = list(services)
    specs = []
    for name in names:
        if name not in SERVICE_CATALOG:
            raise ConfigError(
                f"unknown service {name!r}; catalog has {sorted(SERVICE_CATALOG)}"
            )
        specs.append(SERVICE_CATALOG[name])
    config = ScenarioConfig(
        services=tuple(specs),
        num_sensors=int(num_sensors),
        seed=int(seed),
        **overrides,
    )
    config.validate(strict=True)
    return config

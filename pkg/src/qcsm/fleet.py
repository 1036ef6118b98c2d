"""Sensor fleet: heterogeneous nodes, reporting, churn, queues, batteries.

The fleet is the single mutable aggregate in a simulation. One writer
(the environment loop) advances it cycle by cycle; everything else sees
read-only snapshots. Battery drain is tracked as an integer byte total
per node so that many small drains and one large drain of equal size
produce bit-identical lifetimes.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping

import numpy as np

from . import cbor
from .errors import ConfigError, ContractViolation
from .model import (
    PROTOCOL_ENCODING,
    PROTOCOL_TRANSPORT,
    Encoding,
    Protocol,
    QosClassId,
    ScenarioConfig,
    Transport,
    canonical_json,
)


@dataclass(slots=True)
class SensorNode:
    """One device: identity, capability tier, service binding, battery."""

    node_id: int
    service: str
    tier: int
    max_payload_bytes: int
    master: bool
    active: bool = True
    drained_bytes: int = 0
    lifetime_fraction: float = 1.0
    queued_class: QosClassId | None = None
    enqueued_cycle: int = -1

    @property
    def dead(self) -> bool:
        return self.lifetime_fraction <= 0.0


def drain(node: SensorNode, payload_bytes: int, k_drain: float) -> SensorNode:
    """Charge `payload_bytes` of transmission against the node battery.

    Additive and order-independent: lifetime is recomputed from the
    integer running total, so drain(b) twice equals drain(2b) exactly.
    """
    if payload_bytes < 0:
        raise ContractViolation(f"cannot drain a negative byte count: {payload_bytes}")
    node.drained_bytes += payload_bytes
    node.lifetime_fraction = max(0.0, 1.0 - k_drain * node.drained_bytes)
    if node.lifetime_fraction == 0.0:
        node.active = False
    return node


@dataclass(frozen=True, slots=True)
class Envelope:
    """One report on the wire, exactly as the gateway receives it."""

    source_id: int
    service: str
    protocol: Protocol
    transport: Transport
    encoding: Encoding
    payload: bytes
    emitted_cycle: int

    def check(self) -> None:
        if PROTOCOL_TRANSPORT[self.protocol] != self.transport:
            raise ContractViolation(
                f"{self.protocol.value} must ride {PROTOCOL_TRANSPORT[self.protocol].value}"
            )
        if PROTOCOL_ENCODING[self.protocol] != self.encoding:
            raise ContractViolation(
                f"{self.protocol.value} must carry {PROTOCOL_ENCODING[self.protocol].value}"
            )


class Fleet:
    """All nodes of one scenario plus the per-class service queues."""

    def __init__(self, config: ScenarioConfig, nodes: list[SensorNode]):
        self.config = config
        self.nodes = nodes
        # Current service -> QoS class mapping; reports follow it.
        self.assignment: dict[str, QosClassId] = {
            s.name: QosClassId.DELAY_SENSITIVE for s in config.services
        }
        # Insertion-ordered node ids per class: FIFO service queues.
        self.queues: dict[QosClassId, dict[int, int]] = {
            QosClassId.DELAY_SENSITIVE: {},
            QosClassId.DELAY_TOLERANT: {},
        }
        self._by_service: dict[str, list[int]] = {s.name: [] for s in config.services}
        for node in nodes:
            self._by_service[node.service].append(node.node_id)
        # Incrementally maintained: active device count per service.
        self._active_by_service: dict[str, int] = {
            name: sum(1 for i in ids if nodes[i].active)
            for name, ids in self._by_service.items()
        }

    # Counting -------------------------------------------------------

    def active_count(self) -> int:
        return sum(self._active_by_service.values())

    def assigned_count(self, class_id: QosClassId) -> int:
        """Active devices whose service currently maps to the class."""
        return sum(
            count
            for name, count in self._active_by_service.items()
            if self.assignment[name] == class_id
        )

    def active_service_count(self, service: str) -> int:
        return self._active_by_service[service]

    def waiting_count(self, class_id: QosClassId) -> int:
        """Devices waiting in the class queue for acknowledgement."""
        return len(self.queues[class_id])

    def service_nodes(self, service: str) -> list[SensorNode]:
        return [self.nodes[i] for i in self._by_service[service]]

    def mean_lifetime(self, node_ids: Iterable[int] | None = None) -> float:
        ids = list(node_ids) if node_ids is not None else range(len(self.nodes))
        values = [self.nodes[i].lifetime_fraction for i in ids]
        return float(np.mean(values)) if values else 0.0

    # Assignment -----------------------------------------------------

    def set_assignment(self, service: str, class_id: QosClassId) -> None:
        """Move a service between classes; waiting devices move with it."""
        if service not in self.assignment:
            raise ConfigError(f"no such service: {service}")
        old = self.assignment[service]
        if old == class_id:
            return
        self.assignment[service] = class_id
        moved = [
            nid for nid in self.queues[old] if self.nodes[nid].service == service
        ]
        for nid in moved:
            cycle = self.queues[old].pop(nid)
            self.queues[class_id][nid] = cycle
            self.nodes[nid].queued_class = class_id

    def apply_assignment(self, assignment: Mapping[str, QosClassId]) -> None:
        for service, class_id in assignment.items():
            self.set_assignment(service, class_id)

    # Per-cycle mechanics ---------------------------------------------

    def apply_churn(self, rng: np.random.Generator) -> int:
        """Toggle non-master availability; returns the number of flips.

        Draws one uniform per node every call, so the stream position
        never depends on the current assignment or on who is a master.
        """
        p = self.config.churn_probability
        draws = rng.random(len(self.nodes))
        flips = 0
        for idx in np.flatnonzero(draws < p):
            node = self.nodes[idx]
            if node.master or node.dead:
                continue
            node.active = not node.active
            flips += 1
            self._active_by_service[node.service] += 1 if node.active else -1
            if not node.active and node.queued_class is not None:
                self.queues[node.queued_class].pop(node.node_id, None)
                node.queued_class = None
        return flips

    def generate_traffic(
        self, cycle: int, rng: np.random.Generator, build_envelopes: bool = True
    ) -> list[Envelope]:
        """Emit every report due this cycle and charge its battery cost.

        A node is due when active and the cycle lands on its phase slot
        within the class reporting interval. Emission also (re)joins the
        class queue; a node already waiting keeps its original slot.
        With `build_envelopes` off the wire bytes are skipped (drain,
        queueing and the value stream are unaffected).
        """
        values = rng.random(len(self.nodes))
        cycle_ms = self.config.cycle_ms
        intervals = {
            q.class_id: q.interval_cycles(cycle_ms) for q in self.config.qos_classes
        }
        protocols = {s.name: s.protocol for s in self.config.services}
        envelopes: list[Envelope] = []
        for node in self.nodes:
            if not node.active:
                continue
            class_id = self.assignment[node.service]
            interval = intervals[class_id]
            if cycle % interval != node.node_id % interval:
                continue
            doc = {
                "cycle": cycle,
                "sensor": node.node_id,
                "value": round(float(values[node.node_id]), 6),
            }
            document = canonical_json(doc)
            # Energy cost follows the document size, not the wire size,
            # so class comparisons are not skewed by encoding compactness.
            drain(node, len(document.encode("utf-8")), self.config.k_drain)
            if not node.active:
                self._active_by_service[node.service] -= 1
                if node.queued_class is not None:
                    self.queues[node.queued_class].pop(node.node_id, None)
                    node.queued_class = None
                continue
            if build_envelopes:
                protocol = protocols[node.service]
                encoding = PROTOCOL_ENCODING[protocol]
                if encoding is Encoding.CBOR:
                    payload = cbor.encode(doc)
                else:
                    payload = document.encode("utf-8")
                if len(payload) > node.max_payload_bytes:
                    raise ContractViolation(
                        f"payload of {len(payload)} bytes exceeds tier {node.tier} "
                        f"cap of {node.max_payload_bytes}"
                    )
                envelopes.append(
                    Envelope(
                        source_id=node.node_id,
                        service=node.service,
                        protocol=protocol,
                        transport=PROTOCOL_TRANSPORT[protocol],
                        encoding=encoding,
                        payload=payload,
                        emitted_cycle=cycle,
                    )
                )
            if node.queued_class is None:
                node.queued_class = class_id
                node.enqueued_cycle = cycle
                self.queues[class_id][node.node_id] = cycle
        return envelopes

    def release(self, class_id: QosClassId, capacity: int) -> list[int]:
        """Acknowledge up to `capacity` longest-waiting devices of a class."""
        if capacity <= 0:
            return []
        queue = self.queues[class_id]
        released = list(queue.keys())[:capacity]
        for nid in released:
            del queue[nid]
            self.nodes[nid].queued_class = None
        return released

    def snapshot_doc(self) -> list[dict[str, Any]]:
        """Every node with every field, as one JSON-ready array."""
        return [
            {
                "node_id": node.node_id,
                "service": node.service,
                "tier": node.tier,
                "max_payload_bytes": node.max_payload_bytes,
                "master": node.master,
                "active": node.active,
                "drained_bytes": node.drained_bytes,
                "lifetime_fraction": node.lifetime_fraction,
                "queued_class": node.queued_class.value if node.queued_class else None,
                "enqueued_cycle": node.enqueued_cycle,
            }
            for node in self.nodes
        ]

    def check_invariants(self) -> None:
        for name, ids in self._by_service.items():
            actual = sum(1 for i in ids if self.nodes[i].active)
            if actual != self._active_by_service[name]:
                raise ContractViolation(f"active count desynced for service {name}")
        for class_id, queue in self.queues.items():
            for nid in queue:
                node = self.nodes[nid]
                if node.queued_class != class_id:
                    raise ContractViolation(f"queue membership desynced for node {nid}")
                if not node.active:
                    raise ContractViolation(f"inactive node {nid} left in a queue")
            if self.waiting_count(class_id) > self.assigned_count(class_id):
                raise ContractViolation(
                    f"{class_id.value}: waiting exceeds assigned device count"
                )


def spawn_fleet(config: ScenarioConfig) -> Fleet:
    """Deterministically lay out the fleet described by a scenario.

    Services own contiguous node blocks (even split, remainder to the
    earlier services) and the first node of each block is the master.
    Device tiers rotate fleet-wide by node id, so tier counts differ by
    at most one.
    """
    config.validate(strict=False)
    n = config.num_sensors
    j = len(config.services)
    sizes = [n // j + (1 if idx < n % j else 0) for idx in range(j)]
    nodes: list[SensorNode] = []
    node_id = 0
    for svc, size in zip(config.services, sizes):
        for offset in range(size):
            device = config.device_classes[node_id % len(config.device_classes)]
            nodes.append(
                SensorNode(
                    node_id=node_id,
                    service=svc.name,
                    tier=device.tier,
                    max_payload_bytes=device.max_payload_bytes,
                    master=(offset == 0),
                )
            )
            node_id += 1
    return Fleet(config, nodes)


def tier_histogram(fleet: Fleet) -> dict[int, int]:
    counts: dict[int, int] = {}
    for node in fleet.nodes:
        counts[node.tier] = counts.get(node.tier, 0) + 1
    return dict(sorted(counts.items()))


def expected_drain_weight(fleet: Fleet) -> float:
    """Mean reporting frequency over active nodes, in reports per cycle.

    Equals 1.0 when every active node reports each cycle, so dividing by
    the all-sensitive figure normalizes battery-drain rates with the
    per-byte constant cancelled.
    """
    cycle_ms = fleet.config.cycle_ms
    intervals = {
        q.class_id: q.interval_cycles(cycle_ms) for q in fleet.config.qos_classes
    }
    m = fleet.active_count()
    if m == 0:
        return 0.0
    total = sum(
        fleet.active_service_count(name) / intervals[class_id]
        for name, class_id in fleet.assignment.items()
    )
    return total / m

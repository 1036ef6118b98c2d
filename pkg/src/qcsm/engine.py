"""QoS management engine: MDP vocabulary, Q-learning, environment model.

The decision problem is tiny and exact: a state is the current
service-to-class mapping (one bit per service), an action either does
nothing or pins one service to one class. The environment advances the
fleet one cycle per decision and rewards KPI satisfaction net of a
battery-drain penalty. A frozen variant replaces the live queues with
their steady-state values, which makes the dynamics an exact function
of the assignment and lets a value-iteration oracle check the learner.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .errors import ConfigError, ContractViolation, DensityUndefined, NotTrained
from .fleet import Envelope, Fleet, expected_drain_weight, spawn_fleet
from .model import QosClass, QosClassId, ScenarioConfig, ServiceSpec
from .rng import StreamBundle, named_stream


@dataclass(frozen=True, slots=True)
class Action:
    """Assign one service to one class, or (None, None) to change nothing."""

    service: str | None
    qos_class: QosClassId | None

    @property
    def is_noop(self) -> bool:
        return self.service is None


NOOP = Action(None, None)


def action_space(services: Sequence[ServiceSpec]) -> list[Action]:
    """No-op first, then per service: pin sensitive, pin tolerant."""
    actions = [NOOP]
    for svc in services:
        actions.append(Action(svc.name, QosClassId.DELAY_SENSITIVE))
        actions.append(Action(svc.name, QosClassId.DELAY_TOLERANT))
    return actions


@dataclass(frozen=True, slots=True)
class NetworkState:
    """Current assignment, ordered like the scenario's service list."""

    assignment: tuple[QosClassId, ...]

    @property
    def index(self) -> int:
        # Bit j set iff service j is delay tolerant.
        idx = 0
        for j, class_id in enumerate(self.assignment):
            if class_id is QosClassId.DELAY_TOLERANT:
                idx |= 1 << j
        return idx

    @classmethod
    def from_index(cls, index: int, num_services: int) -> "NetworkState":
        if not 0 <= index < 2**num_services:
            raise ContractViolation(f"state index {index} out of range")
        return cls(
            tuple(
                QosClassId.DELAY_TOLERANT if index >> j & 1 else QosClassId.DELAY_SENSITIVE
                for j in range(num_services)
            )
        )

    def apply(self, action: Action, service_order: Sequence[str]) -> "NetworkState":
        if action.is_noop:
            return self
        j = list(service_order).index(action.service)
        updated = list(self.assignment)
        updated[j] = action.qos_class
        return NetworkState(tuple(updated))


@dataclass(frozen=True, slots=True)
class QosDensity:
    """Occupancy-per-waiting ratio of one class at one instant."""

    class_id: QosClassId
    index: int
    occupants: float
    waiting: float
    alpha: float
    fallback: bool


def compute_density(occupants: float, waiting: float, class_id: QosClassId, index: int) -> QosDensity:
    """Strict form: an empty queue has no defined density."""
    if waiting == 0:
        raise DensityUndefined(f"{class_id.value}: no device is waiting")
    return QosDensity(class_id, index, occupants, waiting, occupants / waiting, False)


def density_or_fallback(
    occupants: float, waiting: float, class_id: QosClassId, index: int
) -> QosDensity:
    """Monitoring form: substitute the occupant count and flag it."""
    try:
        return compute_density(occupants, waiting, class_id, index)
    except DensityUndefined:
        return QosDensity(class_id, index, occupants, waiting, float(occupants), True)


class DensityMonitor:
    """Caches per-class densities; recomputes only when the device count moves."""

    def __init__(self) -> None:
        self.previous_m: int | None = None
        self.cached: tuple[QosDensity, ...] = ()
        self.recomputations = 0

    def recompute_on_change(
        self, fleet: Fleet, qos_classes: Sequence[QosClass]
    ) -> tuple[QosDensity, ...]:
        m = fleet.active_count()
        if m == self.previous_m and self.cached:
            return self.cached
        self.previous_m = m
        self.recomputations += 1
        self.cached = tuple(
            density_or_fallback(
                fleet.assigned_count(q.class_id),
                fleet.waiting_count(q.class_id),
                q.class_id,
                q.index,
            )
            for q in qos_classes
        )
        return self.cached


@dataclass(frozen=True)
class StateSnapshot:
    """Everything the reward and the reporting layer read per cycle."""

    cycle: int
    state: NetworkState
    active_devices: int
    assigned: Mapping[QosClassId, float]
    waiting: Mapping[QosClassId, float]
    requests: Mapping[QosClassId, float]
    delay_ms: Mapping[str, float]
    loss_rate: Mapping[str, float]
    drain_weight: float
    densities: tuple[QosDensity, ...]


def staleness_ms(qos: QosClass, cycle_ms: float) -> float:
    """Mean age a report accumulates waiting on its own interval slot."""
    return (qos.interval_cycles(cycle_ms) - 1) / 2.0 * cycle_ms


def reward(
    snapshot: StateSnapshot,
    services: Sequence[ServiceSpec],
    w_kpi: float,
    w_energy: float,
) -> float:
    """KPI satisfaction (+1/-1 per service) minus the normalized drain rate."""
    sat_total = 0.0
    for svc in services:
        ok = (
            snapshot.delay_ms[svc.name] <= svc.max_delay_ms
            and snapshot.loss_rate[svc.name] <= svc.max_loss_rate
        )
        sat_total += 1.0 if ok else -1.0
    return w_kpi * sat_total - w_energy * snapshot.drain_weight


class QTable:
    """Dense tabular action-value store with visit counting."""

    def __init__(self, num_states: int, num_actions: int):
        if num_states < 1 or num_actions < 1:
            raise ContractViolation("Q-table dimensions must be positive")
        self.values = np.zeros((num_states, num_actions), dtype=np.float64)
        self.visits = np.zeros((num_states, num_actions), dtype=np.int64)

    @property
    def num_states(self) -> int:
        return self.values.shape[0]

    @property
    def num_actions(self) -> int:
        return self.values.shape[1]

    def best_action(self, state: int) -> int:
        """Greedy action; ties break to the lowest action index."""
        return int(np.argmax(self.values[state]))

    def update(
        self, state: int, action: int, r: float, next_state: int, lr: float, gamma: float
    ) -> float:
        if not 0 <= state < self.num_states or not 0 <= next_state < self.num_states:
            raise ContractViolation("state index out of range")
        if not 0 <= action < self.num_actions:
            raise ContractViolation("action index out of range")
        if not 0.0 < lr <= 1.0:
            raise ContractViolation(f"learning rate must lie in (0, 1]: {lr}")
        if not 0.0 <= gamma < 1.0:
            raise ContractViolation(f"gamma must lie in [0, 1): {gamma}")
        if not math.isfinite(r):
            raise ContractViolation(f"reward must be finite: {r}")
        current = self.values[state, action]
        target = r + gamma * float(np.max(self.values[next_state]))
        updated = current + lr * (target - current)
        self.values[state, action] = updated
        self.visits[state, action] += 1
        return float(updated)


def epsilon_schedule(episode: int, total_episodes: int) -> float:
    """Exploration rate: full for the first tenth, then linear to a 0.05 floor."""
    if total_episodes < 1:
        raise ContractViolation("total_episodes must be >= 1")
    if not 0 <= episode < total_episodes:
        raise ContractViolation(f"episode {episode} outside [0, {total_episodes})")
    warmup = int(0.1 * total_episodes)
    if episode < warmup:
        return 1.0
    span = total_episodes - 1 - warmup
    if span <= 0:
        return 0.05
    return max(0.05, 1.0 - 0.95 * (episode - warmup + 1) / span)


def select_action(
    qtable: QTable, state: int, epsilon: float, rng: np.random.Generator
) -> int:
    """Epsilon-greedy draw; consumes one uniform, plus one draw when exploring."""
    if not 0.0 <= epsilon <= 1.0:
        raise ContractViolation(f"epsilon must lie in [0, 1]: {epsilon}")
    if rng.random() < epsilon:
        return int(rng.integers(qtable.num_actions))
    return qtable.best_action(state)


class RunningDatastore:
    """Sliding-window store of recent cycle snapshots."""

    def __init__(self, window_s: float, cycle_ms: float):
        self.window_cycles = max(1, round(window_s * 1000.0 / cycle_ms))
        self._items: list[tuple[int, StateSnapshot]] = []

    def append(self, cycle: int, snapshot: StateSnapshot) -> None:
        self._items.append((cycle, snapshot))
        horizon = cycle - self.window_cycles
        while self._items and self._items[0][0] <= horizon:
            self._items.pop(0)

    def items(self) -> list[tuple[int, StateSnapshot]]:
        return list(self._items)

    def __len__(self) -> int:
        return len(self._items)


class CandidateDatastore:
    """Holds the last published greedy policy, one action per state."""

    def __init__(self) -> None:
        self._policy: dict[int, Action] | None = None
        self.published_at_episode: int | None = None

    def publish(self, qtable: QTable, actions: Sequence[Action], episode: int | None = None) -> None:
        self._policy = {s: actions[qtable.best_action(s)] for s in range(qtable.num_states)}
        self.published_at_episode = episode

    def recommend(self, state_index: int) -> Action:
        if self._policy is None:
            raise NotTrained("no policy has been published yet")
        if state_index not in self._policy:
            raise ContractViolation(f"state index {state_index} out of range")
        return self._policy[state_index]


class EnvironmentModel:
    """Discrete-time world the engine learns on.

    Live mode advances the real fleet: churn, external service requests,
    report emission with battery drain, queue release, measurement.
    Frozen mode replaces queues with their per-assignment steady state
    (full fleet, no churn, no requests), so transitions and rewards are
    an exact deterministic function of the assignment.
    """

    def __init__(
        self,
        config: ScenarioConfig,
        frozen: bool = False,
        gateways: Sequence = (),
    ):
        config.validate(strict=False)
        self.config = config
        self.frozen = frozen
        self.gateways = list(gateways)
        self.actions = action_space(config.services)
        self.num_states = 2 ** len(config.services)
        self.num_actions = len(self.actions)
        self._order = [s.name for s in config.services]
        self._sensitive = config.qos_class(QosClassId.DELAY_SENSITIVE)
        self._tolerant = config.qos_class(QosClassId.DELAY_TOLERANT)
        self.running = RunningDatastore(config.datastore_window_s, config.cycle_ms)
        self.monitor = DensityMonitor()
        self._frozen_rewards: dict[int, tuple[float, StateSnapshot]] = {}
        self.fleet: Fleet = None  # type: ignore[assignment]
        self.reset()

    # Lifecycle --------------------------------------------------------

    def reset(self) -> StateSnapshot:
        self.streams = StreamBundle(self.config.seed)
        self.fleet = spawn_fleet(self.config)
        self.cycle = 0
        self.monitor = DensityMonitor()
        self.running = RunningDatastore(self.config.datastore_window_s, self.config.cycle_ms)
        self._frozen_rewards.clear()
        if self.frozen:
            _, snapshot = self._frozen_eval(self.state)
        else:
            snapshot = self._measure({q.class_id: 0.0 for q in self.config.qos_classes})
        self.last_snapshot = snapshot
        return snapshot

    @property
    def state(self) -> NetworkState:
        return NetworkState(tuple(self.fleet.assignment[name] for name in self._order))

    def qos_of(self, class_id: QosClassId) -> QosClass:
        return self._sensitive if class_id is QosClassId.DELAY_SENSITIVE else self._tolerant

    # Stepping ---------------------------------------------------------

    def step(self, action: Action) -> tuple[float, StateSnapshot]:
        if action.is_noop is False and action.service not in self.fleet.assignment:
            raise ConfigError(f"action names unknown service {action.service!r}")
        if not action.is_noop:
            self.fleet.set_assignment(action.service, action.qos_class)
        self.cycle += 1
        if self.frozen:
            r, snapshot = self._frozen_eval(self.state)
            snapshot = _with_cycle(snapshot, self.cycle)
        else:
            snapshot = self._advance_cycle()
            r = reward(snapshot, self.config.services, self.config.w_kpi, self.config.w_energy)
        self.running.append(self.cycle, snapshot)
        self.last_snapshot = snapshot
        return r, snapshot

    def run_cycles(self, cycles: int) -> StateSnapshot:
        """Advance the world without changing the assignment."""
        snapshot = self.last_snapshot
        for _ in range(cycles):
            _, snapshot = self.step(NOOP)
        return snapshot

    # Live dynamics ------------------------------------------------------

    def _advance_cycle(self) -> StateSnapshot:
        config = self.config
        fleet = self.fleet
        fleet.apply_churn(self.streams.get("churn"))
        # External service requests arrive per service and occupy the
        # class queue slots that would otherwise acknowledge devices.
        # Demand follows a two-phase daily profile: a peak period at the
        # start of the horizon, then a lighter steady rate.
        if self.cycle <= config.request_peak_cycles:
            lam = config.request_peak_rate
        else:
            lam = config.request_rate
        draws = self.streams.get("requests").poisson(lam, len(self._order))
        requests: dict[QosClassId, float] = {
            QosClassId.DELAY_SENSITIVE: 0.0,
            QosClassId.DELAY_TOLERANT: 0.0,
        }
        for name, req in zip(self._order, draws):
            requests[fleet.assignment[name]] += float(req)
        envelopes = fleet.generate_traffic(
            self.cycle, self.streams.get("traffic"), build_envelopes=bool(self.gateways)
        )
        for gw in self.gateways:
            for envelope in envelopes:
                gw.handle_message(envelope)
        for qos in config.qos_classes:
            effective = max(0, qos.service_capacity_per_cycle - int(requests[qos.class_id]))
            fleet.release(qos.class_id, effective)
        return self._measure(requests)

    def _measure(self, requests: Mapping[QosClassId, float]) -> StateSnapshot:
        config = self.config
        fleet = self.fleet
        waiting = {q.class_id: float(fleet.waiting_count(q.class_id)) for q in config.qos_classes}
        assigned = {q.class_id: float(fleet.assigned_count(q.class_id)) for q in config.qos_classes}
        delay: dict[str, float] = {}
        loss: dict[str, float] = {}
        for svc in config.services:
            qos = self.qos_of(fleet.assignment[svc.name])
            backlog = waiting[qos.class_id] + requests.get(qos.class_id, 0.0)
            delay[svc.name] = staleness_ms(qos, config.cycle_ms) + config.cycle_ms * (
                backlog / qos.service_capacity_per_cycle
            )
            loss[svc.name] = min(
                1.0, 0.01 * max(0.0, waiting[qos.class_id] - qos.service_capacity_per_cycle)
            )
        return StateSnapshot(
            cycle=self.cycle,
            state=self.state,
            active_devices=fleet.active_count(),
            assigned=assigned,
            waiting=waiting,
            requests=dict(requests),
            delay_ms=delay,
            loss_rate=loss,
            drain_weight=expected_drain_weight(fleet),
            densities=self.monitor.recompute_on_change(fleet, config.qos_classes),
        )

    # Frozen dynamics ------------------------------------------------------

    def _frozen_eval(self, state: NetworkState) -> tuple[float, StateSnapshot]:
        """Steady-state reward and snapshot as a pure function of assignment."""
        cached = self._frozen_rewards.get(state.index)
        if cached is not None:
            return cached
        config = self.config
        counts = {name: len(self.fleet.service_nodes(name)) for name in self._order}
        arrivals = {QosClassId.DELAY_SENSITIVE: 0.0, QosClassId.DELAY_TOLERANT: 0.0}
        occupants = {QosClassId.DELAY_SENSITIVE: 0.0, QosClassId.DELAY_TOLERANT: 0.0}
        for j, name in enumerate(self._order):
            class_id = state.assignment[j]
            qos = self.qos_of(class_id)
            arrivals[class_id] += counts[name] / qos.interval_cycles(config.cycle_ms)
            occupants[class_id] += counts[name]
        waiting = {}
        for qos in config.qos_classes:
            waiting[qos.class_id] = max(
                0.0, arrivals[qos.class_id] - qos.service_capacity_per_cycle
            )
        delay: dict[str, float] = {}
        loss: dict[str, float] = {}
        for j, svc in enumerate(config.services):
            qos = self.qos_of(state.assignment[j])
            delay[svc.name] = staleness_ms(qos, config.cycle_ms) + config.cycle_ms * (
                waiting[qos.class_id] / qos.service_capacity_per_cycle
            )
            loss[svc.name] = min(
                1.0, 0.01 * max(0.0, waiting[qos.class_id] - qos.service_capacity_per_cycle)
            )
        total = sum(counts.values())
        drain_weight = (
            sum(
                counts[name] / self.qos_of(state.assignment[j]).interval_cycles(config.cycle_ms)
                for j, name in enumerate(self._order)
            )
            / total
        )
        densities = tuple(
            density_or_fallback(occupants[q.class_id], waiting[q.class_id], q.class_id, q.index)
            for q in config.qos_classes
        )
        snapshot = StateSnapshot(
            cycle=self.cycle,
            state=state,
            active_devices=total,
            assigned=occupants,
            waiting=waiting,
            requests={q.class_id: 0.0 for q in config.qos_classes},
            delay_ms=delay,
            loss_rate=loss,
            drain_weight=drain_weight,
            densities=densities,
        )
        r = reward(snapshot, config.services, config.w_kpi, config.w_energy)
        self._frozen_rewards[state.index] = (r, snapshot)
        return r, snapshot


def _with_cycle(snapshot: StateSnapshot, cycle: int) -> StateSnapshot:
    return StateSnapshot(
        cycle=cycle,
        state=snapshot.state,
        active_devices=snapshot.active_devices,
        assigned=snapshot.assigned,
        waiting=snapshot.waiting,
        requests=snapshot.requests,
        delay_ms=snapshot.delay_ms,
        loss_rate=snapshot.loss_rate,
        drain_weight=snapshot.drain_weight,
        densities=snapshot.densities,
    )


@dataclass
class TrainingResult:
    qtable: QTable
    reward_trace: np.ndarray
    candidate: CandidateDatastore
    lr: float
    gamma: float
    seed: int
    episodes: int


def run_training(
    env: EnvironmentModel,
    episodes: int,
    lr: float,
    gamma: float,
    seed: int,
    epsilon_fn: Callable[[int, int], float] | None = None,
    qtable: QTable | None = None,
    on_episode: Callable[[int, "EnvironmentModel"], None] | None = None,
) -> TrainingResult:
    """Train on the environment; returns the table, the cumulative
    reward trace (one entry per episode), and the published policy.

    Deterministic for a fixed (env config, seed, lr, gamma, episodes).
    `on_episode` is an observation hook called after each update; it
    must not mutate the environment.
    """
    if episodes < 1:
        raise ConfigError("episodes must be >= 1")
    policy_rng = named_stream(seed, "policy")
    q = qtable or QTable(env.num_states, env.num_actions)
    if q.num_states != env.num_states or q.num_actions != env.num_actions:
        raise ContractViolation("Q-table shape does not match the environment")
    schedule = epsilon_fn or epsilon_schedule
    snapshot = env.reset()
    state = snapshot.state.index
    trace = np.empty(episodes, dtype=np.float64)
    cumulative = 0.0
    for episode in range(episodes):
        eps = schedule(episode, episodes)
        action_idx = select_action(q, state, eps, policy_rng)
        r, snap = env.step(env.actions[action_idx])
        next_state = snap.state.index
        q.update(state, action_idx, r, next_state, lr, gamma)
        cumulative += r
        trace[episode] = cumulative
        state = next_state
        if on_episode is not None:
            on_episode(episode, env)
    candidate = CandidateDatastore()
    candidate.publish(q, env.actions, episode=episodes)
    return TrainingResult(
        qtable=q,
        reward_trace=trace,
        candidate=candidate,
        lr=lr,
        gamma=gamma,
        seed=seed,
        episodes=episodes,
    )


def follow_policy(
    candidate: CandidateDatastore,
    env: EnvironmentModel,
    start: NetworkState | None = None,
    max_steps: int | None = None,
) -> NetworkState:
    """Walk greedy recommendations until a no-op or a revisited state."""
    state = start if start is not None else env.state
    limit = max_steps if max_steps is not None else 4 * len(env._order) + 4
    seen = {state.index}
    for _ in range(limit):
        action = candidate.recommend(state.index)
        if action.is_noop:
            return state
        nxt = state.apply(action, env._order)
        if nxt.index in seen:
            return nxt
        seen.add(nxt.index)
        state = nxt
    return state

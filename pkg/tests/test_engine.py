"""Decision engine: states, densities, reward, Q-table, environments."""

from __future__ import annotations

import dataclasses

import numpy as np
import pytest

from qcsm.engine import (
    NOOP,
    Action,
    CandidateDatastore,
    DensityMonitor,
    EnvironmentModel,
    NetworkState,
    QTable,
    RunningDatastore,
    StateSnapshot,
    action_space,
    compute_density,
    density_or_fallback,
    epsilon_schedule,
    follow_policy,
    reward,
    run_training,
    select_action,
    staleness_ms,
)
from qcsm.errors import (
    ConfigError,
    ContractViolation,
    DensityUndefined,
    NotTrained,
)
from qcsm.fleet import spawn_fleet
from qcsm.gateway import Gateway, GatewayMode
from qcsm.model import QosClass, QosClassId, build_scenario

S = QosClassId.DELAY_SENSITIVE
T = QosClassId.DELAY_TOLERANT
TRIO = ["WindTurbine", "SolarPanel", "Transportation"]


# Actions and states ----------------------------------------------------


def test_action_space_layout(tiny_config):
    actions = action_space(tiny_config.services)
    assert len(actions) == 7
    assert actions[0] is NOOP and actions[0].is_noop
    assert actions[1] == Action("WindTurbine", S)
    assert actions[2] == Action("WindTurbine", T)
    assert actions[5] == Action("Transportation", S)
    assert actions[6] == Action("Transportation", T)
    assert not actions[1].is_noop


@pytest.mark.parametrize("assignment,index", [
    ((S, S, S), 0),
    ((T, S, S), 1),
    ((S, T, S), 2),
    ((S, S, T), 4),
    ((T, T, T), 7),
])
def test_state_index_sets_one_bit_per_tolerant_service(assignment, index):
    assert NetworkState(assignment).index == index
    assert NetworkState.from_index(index, 3) == NetworkState(assignment)


def test_state_index_round_trips_every_index():
    for idx in range(8):
        assert NetworkState.from_index(idx, 3).index == idx


@pytest.mark.parametrize("bad", [-1, 8, 100])
def test_state_from_index_range_checked(bad):
    with pytest.raises(ContractViolation):
        NetworkState.from_index(bad, 3)


def test_state_apply():
    order = TRIO
    state = NetworkState((S, S, S))
    assert state.apply(NOOP, order) is state
    moved = state.apply(Action("SolarPanel", T), order)
    assert moved == NetworkState((S, T, S))
    assert state == NetworkState((S, S, S))  # original untouched
    back = moved.apply(Action("SolarPanel", S), order)
    assert back.index == 0


# Densities -------------------------------------------------------------


def test_density_is_occupants_per_waiting():
    d = compute_density(12.0, 4.0, T, 2)
    assert d.alpha == 3.0
    assert d.fallback is False


def test_density_undefined_on_empty_queue():
    with pytest.raises(DensityUndefined):
        compute_density(12.0, 0.0, S, 1)


def test_density_fallback_substitutes_occupant_count():
    d = density_or_fallback(9.0, 0.0, S, 1)
    assert d.alpha == 9.0 and d.fallback is True
    strict = density_or_fallback(9.0, 3.0, S, 1)
    assert strict.alpha == 3.0 and strict.fallback is False


def test_monitor_recomputes_only_when_device_count_moves(tiny_config):
    config = dataclasses.replace(tiny_config, churn_probability=1.0)
    fleet = spawn_fleet(config)
    monitor = DensityMonitor()
    first = monitor.recompute_on_change(fleet, config.qos_classes)
    again = monitor.recompute_on_change(fleet, config.qos_classes)
    assert monitor.recomputations == 1
    assert again is first  # cached tuple, not a fresh computation
    from qcsm.rng import named_stream

    fleet.apply_churn(named_stream(3, "churn"))  # every non-master leaves
    assert fleet.active_count() == 3
    monitor.recompute_on_change(fleet, config.qos_classes)
    assert monitor.recomputations == 2


# Staleness and reward ----------------------------------------------------


@pytest.mark.parametrize("interval_ms,cycle_ms,expected", [
    (100.0, 100.0, 0.0),     # reports every cycle: no queueing age
    (500.0, 100.0, 200.0),   # five-cycle interval: mean age of 2 cycles
    (500.0, 50.0, 225.0),
])
def test_staleness_grows_with_reporting_interval(interval_ms, cycle_ms, expected):
    qos = QosClass(T, 2, interval_ms, 10)
    assert staleness_ms(qos, cycle_ms) == expected


def snapshot_with(delay, loss, drain, services):
    return StateSnapshot(
        cycle=1,
        state=NetworkState(tuple(S for _ in services)),
        active_devices=12,
        assigned={S: 12.0, T: 0.0},
        waiting={S: 0.0, T: 0.0},
        requests={S: 0.0, T: 0.0},
        delay_ms={svc.name: delay for svc in services},
        loss_rate={svc.name: loss for svc in services},
        drain_weight=drain,
        densities=(),
    )


def test_reward_balances_satisfaction_against_drain(tiny_config):
    services = tiny_config.services
    all_good = snapshot_with(50.0, 0.0, 1.0, services)
    assert reward(all_good, services, 1.0, 4.0) == 3.0 - 4.0
    assert reward(all_good, services, 2.0, 0.5) == 6.0 - 0.5


def test_reward_counts_each_service_separately(tiny_config):
    services = tiny_config.services
    base = snapshot_with(50.0, 0.0, 0.2, services)
    # 150 ms violates Transportation (100 ms budget) but not the others.
    mixed = dataclasses.replace(
        base, delay_ms={"WindTurbine": 150.0, "SolarPanel": 150.0, "Transportation": 150.0}
    )
    assert reward(mixed, services, 1.0, 0.0) == 1.0 + 1.0 - 1.0 - 0.0


def test_reward_loss_violation_flips_sign(tiny_config):
    services = tiny_config.services
    lossy = snapshot_with(0.0, 0.2, 0.0, services)  # 20% loss breaks every budget
    assert reward(lossy, services, 1.0, 0.0) == -3.0


def test_reward_boundary_is_inclusive(tiny_config):
    services = tiny_config.services
    at_limit = dataclasses.replace(
        snapshot_with(0.0, 0.0, 0.0, services),
        delay_ms={"WindTurbine": 300.0, "SolarPanel": 300.0, "Transportation": 100.0},
        loss_rate={"WindTurbine": 0.10, "SolarPanel": 0.10, "Transportation": 0.05},
    )
    assert reward(at_limit, services, 1.0, 0.0) == 3.0


# Q-table ----------------------------------------------------------------


def test_qtable_starts_blank():
    q = QTable(8, 7)
    assert q.values.shape == (8, 7) and not q.values.any()
    assert q.visits.dtype == np.int64 and not q.visits.any()


def test_qtable_update_follows_the_bellman_target():
    q = QTable(2, 3)
    assert q.update(0, 1, 1.0, 1, 0.07, 0.99) == pytest.approx(0.07)
    assert q.values[0, 1] == pytest.approx(0.07)
    q.values[1] = [0.1, 0.3, 0.0]
    got = q.update(0, 1, 0.5, 1, 0.1, 0.99)
    # target = 0.5 + 0.99 * 0.3; step = 0.1 * (target - 0.07)
    assert got == pytest.approx(0.07 + 0.1 * (0.5 + 0.99 * 0.3 - 0.07), rel=1e-12)
    assert q.visits[0, 1] == 2 and q.visits.sum() == 2


def test_qtable_full_learning_rate_overwrites():
    q = QTable(2, 2)
    q.values[1] = [2.0, 5.0]
    q.update(0, 0, 1.0, 1, 1.0, 0.5)
    assert q.values[0, 0] == pytest.approx(1.0 + 0.5 * 5.0)


def test_qtable_ties_break_to_the_lowest_action():
    q = QTable(1, 4)
    q.values[0] = [0.5, 1.0, 1.0, 0.2]
    assert q.best_action(0) == 1


@pytest.mark.parametrize("kwargs", [
    dict(state=-1), dict(state=2), dict(next_state=9),
    dict(action=-1), dict(action=3),
    dict(lr=0.0), dict(lr=1.5), dict(lr=-0.1),
    dict(gamma=1.0), dict(gamma=-0.01),
    dict(r=float("nan")), dict(r=float("inf")),
])
def test_qtable_update_rejects_bad_arguments(kwargs):
    q = QTable(2, 3)
    call = dict(state=0, action=0, r=0.0, next_state=1, lr=0.5, gamma=0.9)
    call.update(kwargs)
    with pytest.raises(ContractViolation):
        q.update(**call)


@pytest.mark.parametrize("shape", [(0, 5), (5, 0), (-1, 2)])
def test_qtable_rejects_empty_shapes(shape):
    with pytest.raises(ContractViolation):
        QTable(*shape)


# Exploration schedule -----------------------------------------------------


@pytest.mark.parametrize("episode,total,expected", [
    (0, 10_000, 1.0),
    (999, 10_000, 1.0),          # last warmup episode
    (5_499, 10_000, 0.524947),   # mid-decay
    (9_999, 10_000, 0.05),       # floor
    (0, 1, 0.05),                # degenerate horizon skips straight to the floor
])
def test_epsilon_schedule_pinned_values(episode, total, expected):
    assert epsilon_schedule(episode, total) == pytest.approx(expected, abs=5e-7)


def test_epsilon_schedule_monotone_nonincreasing():
    values = [epsilon_schedule(ep, 500) for ep in range(500)]
    assert all(a >= b for a, b in zip(values, values[1:]))
    assert values[0] == 1.0 and values[-1] == 0.05


@pytest.mark.parametrize("episode,total", [(-1, 10), (10, 10), (0, 0), (5, -2)])
def test_epsilon_schedule_range_checked(episode, total):
    with pytest.raises(ContractViolation):
        epsilon_schedule(episode, total)


def test_select_action_greedy_when_epsilon_zero():
    q = QTable(2, 5)
    q.values[0] = [0.0, 0.0, 3.0, 0.0, 0.0]
    rng = np.random.default_rng(0)
    assert all(select_action(q, 0, 0.0, rng) == 2 for _ in range(20))


def test_select_action_explores_uniformly_when_epsilon_one():
    q = QTable(1, 4)
    q.values[0] = [9.0, 0.0, 0.0, 0.0]
    rng = np.random.default_rng(1)
    picks = {select_action(q, 0, 1.0, rng) for _ in range(200)}
    assert picks == {0, 1, 2, 3}


def test_select_action_draw_budget_is_fixed():
    # Greedy consumes exactly one uniform, exploring exactly one more
    # integer draw; replay the same stream to prove it.
    q = QTable(1, 3)
    rng = np.random.default_rng(42)
    select_action(q, 0, 0.0, rng)
    shadow = np.random.default_rng(42)
    shadow.random()
    assert rng.bit_generator.state == shadow.bit_generator.state
    select_action(q, 0, 1.0, rng)
    shadow.random()
    shadow.integers(3)
    assert rng.bit_generator.state == shadow.bit_generator.state


def test_select_action_rejects_bad_epsilon():
    with pytest.raises(ContractViolation):
        select_action(QTable(1, 2), 0, 1.2, np.random.default_rng(0))


# Datastores ---------------------------------------------------------------


def test_running_datastore_window_sizing():
    assert RunningDatastore(60.0, 100.0).window_cycles == 600
    assert RunningDatastore(0.05, 100.0).window_cycles == 1  # floor at one cycle


def test_running_datastore_evicts_old_cycles(tiny_config):
    store = RunningDatastore(0.3, 100.0)  # three-cycle window
    snap = snapshot_with(0.0, 0.0, 0.0, tiny_config.services)
    for cycle in range(1, 11):
        store.append(cycle, snap)
    kept = [cycle for cycle, _ in store.items()]
    assert kept == [8, 9, 10]
    assert len(store) == 3


def test_candidate_datastore_guards():
    candidate = CandidateDatastore()
    with pytest.raises(NotTrained):
        candidate.recommend(0)
    q = QTable(4, 3)
    q.values[2] = [0.0, 1.0, 0.0]
    actions = [NOOP, Action("A", S), Action("A", T)]
    candidate.publish(q, actions, episode=17)
    assert candidate.published_at_episode == 17
    assert candidate.recommend(2) == Action("A", S)
    assert candidate.recommend(0) is NOOP  # blank rows fall back to the no-op
    with pytest.raises(ContractViolation):
        candidate.recommend(4)


# Live environment -----------------------------------------------------------


def test_environment_is_deterministic_for_a_seed(tiny_config):
    def trajectory():
        env = EnvironmentModel(tiny_config)
        out = []
        for i in range(30):
            action = env.actions[i % env.num_actions]
            r, snap = env.step(action)
            out.append((r, snap.state.index, snap.active_devices,
                        tuple(sorted(snap.delay_ms.items()))))
        return out

    assert trajectory() == trajectory()


def test_environment_reset_restores_the_initial_world(tiny_config):
    env = EnvironmentModel(tiny_config)
    first = [env.step(NOOP)[0] for _ in range(10)]
    env.reset()
    assert env.cycle == 0
    second = [env.step(NOOP)[0] for _ in range(10)]
    assert first == second


def test_environment_step_applies_the_action(tiny_config):
    env = EnvironmentModel(tiny_config)
    assert env.state.index == 0  # everything starts delay sensitive
    _, snap = env.step(Action("SolarPanel", T))
    assert snap.state == NetworkState((S, T, S))
    assert env.fleet.assignment["SolarPanel"] is T


def test_environment_rejects_unknown_service(tiny_config):
    env = EnvironmentModel(tiny_config)
    with pytest.raises(ConfigError):
        env.step(Action("Refinery", T))


def test_demand_profile_switches_after_the_peak_window():
    config = build_scenario(
        TRIO,
        12,
        seed=11,
        request_rate=0.0,
        request_peak_rate=8.0,
        request_peak_cycles=3,
        churn_probability=0.0,
    )
    env = EnvironmentModel(config)
    totals = []
    for _ in range(6):
        _, snap = env.step(NOOP)
        totals.append(sum(snap.requests.values()))
    assert sum(totals[:3]) > 0.0   # peak-phase arrivals
    assert totals[3:] == [0.0, 0.0, 0.0]  # off-peak rate of zero is exact


def test_environment_feeds_attached_gateways(tiny_config):
    import dataclasses as dc

    config = dc.replace(tiny_config, churn_probability=0.0)
    gws = [Gateway(GatewayMode.QCSM), Gateway(GatewayMode.BASELINE)]
    env = EnvironmentModel(config, gateways=gws)
    env.run_cycles(10)
    assert len(gws[0].pool) == len(gws[1].pool) > 0
    import json

    docs = gws[0].query().documents
    assert all(set(json.loads(d)) == {"cycle", "sensor", "value"} for d in docs)


def test_run_cycles_advances_without_reassignment(tiny_config):
    env = EnvironmentModel(tiny_config)
    snap = env.run_cycles(5)
    assert env.cycle == 5 and snap.cycle == 5
    assert snap.state.index == 0
    assert len(env.running) == 5


# Frozen environment ----------------------------------------------------------


def frozen_env(n=12, seed=7):
    config = build_scenario(TRIO, n, seed=seed)
    return EnvironmentModel(config, frozen=True)


def test_frozen_reward_all_sensitive_hand_computed():
    env = frozen_env()
    r, snap = env.step(NOOP)
    # 12 devices reporting every cycle stay inside capacity 50: all three
    # KPIs satisfied (+3), but every battery drains at full rate (weight 1).
    assert r == pytest.approx(3.0 - 4.0 * 1.0)
    assert snap.drain_weight == 1.0
    assert all(v == 0.0 for v in snap.waiting.values())


def test_frozen_reward_all_tolerant_hand_computed():
    env = frozen_env()
    for name in TRIO:
        env.step(Action(name, T))
    r, snap = env.step(NOOP)
    # 200 ms staleness satisfies the 300 ms budgets but breaks
    # Transportation's 100 ms budget: net +1. Drain falls to 1/5.
    assert snap.delay_ms["Transportation"] == pytest.approx(200.0)
    assert r == pytest.approx(1.0 - 4.0 * 0.2)


def test_frozen_reward_best_split_hand_computed():
    env = frozen_env()
    env.step(Action("WindTurbine", T))
    r, snap = env.step(Action("SolarPanel", T))
    # Tolerant monitoring fleets, sensitive transportation: +3 satisfied,
    # drain (4/5 + 4/5 + 4) / 12 = 7/15.
    assert snap.state.index == 3
    assert r == pytest.approx(3.0 - 4.0 * (7.0 / 15.0))


def test_frozen_transitions_are_cached_and_deterministic():
    env = frozen_env()
    r1, _ = env.step(NOOP)
    r2, _ = env.step(NOOP)
    assert r1 == r2
    assert set(env._frozen_rewards) == {0}
    env.step(Action("WindTurbine", T))
    assert set(env._frozen_rewards) == {0, 1}


def test_frozen_world_never_loses_devices():
    env = frozen_env()
    for i in range(20):
        _, snap = env.step(env.actions[i % env.num_actions])
        assert snap.active_devices == 12
        assert sum(snap.requests.values()) == 0.0


# Training loop ---------------------------------------------------------------


def test_training_is_deterministic(tiny_config):
    def run():
        env = EnvironmentModel(tiny_config)
        return run_training(env, episodes=64, lr=0.2, gamma=0.9, seed=5)

    a, b = run(), run()
    assert np.array_equal(a.reward_trace, b.reward_trace)
    assert np.array_equal(a.qtable.values, b.qtable.values)
    assert a.reward_trace.shape == (64,)


def test_training_seed_changes_the_trajectory(tiny_config):
    env = EnvironmentModel(tiny_config)
    a = run_training(env, episodes=64, lr=0.2, gamma=0.9, seed=5)
    b = run_training(env, episodes=64, lr=0.2, gamma=0.9, seed=6)
    assert not np.array_equal(a.reward_trace, b.reward_trace)


def test_training_trace_is_cumulative(tiny_config):
    env = EnvironmentModel(tiny_config)
    result = run_training(env, episodes=64, lr=0.2, gamma=0.9, seed=5)
    steps = np.diff(np.concatenate(([0.0], result.reward_trace)))
    assert np.all(np.isfinite(steps))
    assert result.candidate.published_at_episode == 64


def test_training_honours_a_custom_exploration_schedule(tiny_config):
    seen = []

    def always_greedy(episode, total):
        seen.append((episode, total))
        return 0.0

    env = EnvironmentModel(tiny_config)
    run_training(env, episodes=8, lr=0.2, gamma=0.9, seed=5, epsilon_fn=always_greedy)
    assert seen == [(ep, 8) for ep in range(8)]


def test_training_can_continue_from_an_existing_table(tiny_config):
    env = EnvironmentModel(tiny_config)
    first = run_training(env, episodes=16, lr=0.2, gamma=0.9, seed=5)
    resumed = run_training(
        env, episodes=16, lr=0.2, gamma=0.9, seed=5, qtable=first.qtable
    )
    assert resumed.qtable is first.qtable
    assert resumed.qtable.visits.sum() == 32


def test_training_rejects_mismatched_tables(tiny_config):
    env = EnvironmentModel(tiny_config)
    with pytest.raises(ContractViolation):
        run_training(env, episodes=4, lr=0.2, gamma=0.9, seed=5, qtable=QTable(2, 2))
    with pytest.raises(ConfigError):
        run_training(env, episodes=0, lr=0.2, gamma=0.9, seed=5)


def test_frozen_training_finds_the_best_stationary_assignment():
    env = frozen_env()
    result = run_training(
        env, episodes=4_000, lr=1.0, gamma=0.5, seed=0,
        epsilon_fn=lambda ep, total: 1.0,
    )
    final = follow_policy(result.candidate, env, start=NetworkState.from_index(0, 3))
    # Tolerant monitoring services with sensitive transportation pay the
    # least energy while meeting every budget.
    assert final.index == 3


# Policy walk ------------------------------------------------------------------


def test_follow_policy_stops_at_a_noop(tiny_config):
    env = EnvironmentModel(tiny_config)
    q = QTable(env.num_states, env.num_actions)
    q.values[0, 2] = 1.0        # state 0: make WindTurbine tolerant
    q.values[1, 4] = 1.0        # state 1: make SolarPanel tolerant
    # state 3 keeps all-zero values: argmax falls on the no-op.
    candidate = CandidateDatastore()
    candidate.publish(q, env.actions)
    final = follow_policy(candidate, env, start=NetworkState.from_index(0, 3))
    assert final.index == 3


def test_follow_policy_stops_on_a_revisit(tiny_config):
    env = EnvironmentModel(tiny_config)
    q = QTable(env.num_states, env.num_actions)
    q.values[0, 2] = 1.0        # state 0 -> tolerant wind
    q.values[1, 1] = 1.0        # state 1 -> sensitive wind: back to state 0
    candidate = CandidateDatastore()
    candidate.publish(q, env.actions)
    final = follow_policy(candidate, env, start=NetworkState.from_index(0, 3))
    assert final.index == 0  # the walk halts when it loops


def test_follow_policy_defaults_to_the_environment_state(tiny_config):
    env = EnvironmentModel(tiny_config)
    candidate = CandidateDatastore()
    candidate.publish(QTable(env.num_states, env.num_actions), env.actions)
    assert follow_policy(candidate, env).index == env.state.index


def test_training_episode_hook_observes_every_cycle(tiny_config):
    seen = []

    def observer(episode, live):
        seen.append((episode, live.cycle, live.fleet.active_count()))

    env = EnvironmentModel(tiny_config)
    result = run_training(env, episodes=12, lr=0.2, gamma=0.9, seed=5,
                          on_episode=observer)
    assert [episode for episode, _, _ in seen] == list(range(12))
    assert [cycle for _, cycle, _ in seen] == list(range(1, 13))

    plain = run_training(EnvironmentModel(tiny_config), episodes=12,
                         lr=0.2, gamma=0.9, seed=5)
    assert np.array_equal(result.reward_trace, plain.reward_trace)

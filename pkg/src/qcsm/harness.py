"""Scenario harness: the three desk-scale experiments and their reporting.

Each experiment produces per-seed metric rows; aggregation folds seeds
into mean plus a 95% t-interval and renders one fixed CSV schema:

    experiment,method,services,n_sensors,metric,value,ci_low,ci_high,unit,seed_count

Both managers in a comparison consume identical random streams (same
seed, same stream names), so differences are attributable to the method
rather than to luck.
"""

from __future__ import annotations

import csv
import io
import math
import warnings
from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping, Sequence

import numpy as np
from scipy import stats

from .engine import (
    EnvironmentModel,
    NetworkState,
    follow_policy,
    run_training,
    staleness_ms,
)
from .errors import ConfigError
from .gateway import Gateway, GatewayMode
from .model import (
    DEFAULT_SERVICE_PAIRS,
    QosClassId,
    ScenarioConfig,
    ServiceSpec,
    build_scenario,
    config_hash,
)

METHOD_QCSM = "QCSM"
METHOD_BASELINE = "Baseline"

CSV_HEADER = (
    "experiment,method,services,n_sensors,metric,value,ci_low,ci_high,unit,seed_count"
)

DEFAULT_N_GRID = (10, 50, 98, 150)
DEFAULT_SERVICE_COUNTS = (2, 3)
DEFAULT_LEARNING_RATES = (0.7, 0.07, 0.007)

# The lifetime study measures battery behaviour, not convergence under
# bursty demand, so it runs on the steady off-peak request profile.
LIFETIME_WORKLOAD: Mapping[str, Any] = {
    "request_rate": 1.5,
    "request_peak_cycles": 0,
}


@dataclass(frozen=True, slots=True)
class MetricRow:
    """One measured value for one seed."""

    experiment: str
    method: str
    services: int
    n_sensors: int
    metric: str
    value: float
    unit: str
    seed: int


@dataclass(frozen=True, slots=True)
class SummaryRow:
    """Seed-aggregated value with a 95% confidence interval."""

    experiment: str
    method: str
    services: int
    n_sensors: int
    metric: str
    value: float
    ci_low: float
    ci_high: float
    unit: str
    seed_count: int


@dataclass
class ExperimentResult:
    name: str
    rows: list[MetricRow]
    summary: list[SummaryRow]
    details: dict[str, Any] = field(default_factory=dict)


def confidence_interval(values: Sequence[float], level: float = 0.95) -> tuple[float, float, float]:
    """Mean and two-sided t-interval bounds; NaN bounds below two samples."""
    data = np.asarray(list(values), dtype=np.float64)
    if data.size == 0:
        raise ConfigError("cannot aggregate an empty sample")
    mean = float(np.mean(data))
    if data.size < 2:
        warnings.warn("confidence interval undefined for a single sample", stacklevel=2)
        return mean, math.nan, math.nan
    sem = float(np.std(data, ddof=1)) / math.sqrt(data.size)
    half = float(stats.t.ppf(0.5 + level / 2.0, data.size - 1)) * sem
    return mean, mean - half, mean + half


def aggregate_rows(rows: Iterable[MetricRow], level: float = 0.95) -> list[SummaryRow]:
    """Fold per-seed rows into summary rows, keyed by everything but the seed."""
    groups: dict[tuple, list[MetricRow]] = {}
    order: list[tuple] = []
    for row in rows:
        key = (row.experiment, row.method, row.services, row.n_sensors, row.metric, row.unit)
        if key not in groups:
            groups[key] = []
            order.append(key)
        groups[key].append(row)
    summary = []
    for key in order:
        group = groups[key]
        mean, lo, hi = confidence_interval([r.value for r in group], level)
        summary.append(
            SummaryRow(
                experiment=key[0],
                method=key[1],
                services=key[2],
                n_sensors=key[3],
                metric=key[4],
                value=mean,
                ci_low=lo,
                ci_high=hi,
                unit=key[5],
                seed_count=len(group),
            )
        )
    return summary


def summary_to_csv(summary: Iterable[SummaryRow]) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(CSV_HEADER.split(","))
    for row in summary:
        writer.writerow(
            [
                row.experiment,
                row.method,
                row.services,
                row.n_sensors,
                row.metric,
                _fmt(row.value),
                _fmt(row.ci_low),
                _fmt(row.ci_high),
                row.unit,
                row.seed_count,
            ]
        )
    return buffer.getvalue()


def _fmt(value: float) -> str:
    if value is None or (isinstance(value, float) and math.isnan(value)):
        return ""
    return f"{value:.6g}"


def natural_class(service: ServiceSpec, config: ScenarioConfig) -> QosClassId:
    """The laziest class whose built-in report age still meets the KPI."""
    tolerant = config.qos_class(QosClassId.DELAY_TOLERANT)
    if staleness_ms(tolerant, config.cycle_ms) <= service.max_delay_ms:
        return QosClassId.DELAY_TOLERANT
    return QosClassId.DELAY_SENSITIVE


def default_services(count: int) -> tuple[str, ...]:
    if count not in DEFAULT_SERVICE_PAIRS:
        raise ConfigError(f"no default service set of size {count}")
    return DEFAULT_SERVICE_PAIRS[count]


# Response-time experiment ------------------------------------------------


def run_response_experiment(
    seeds: Sequence[int],
    n_grid: Sequence[int] = DEFAULT_N_GRID,
    service_counts: Sequence[int] = DEFAULT_SERVICE_COUNTS,
    warmup_cycles: int = 600,
    query_repeats: int = 3,
    overrides: Mapping[str, Any] | None = None,
) -> ExperimentResult:
    """Query latency of the adapting gateway against the pass-through one.

    Both gateways ingest the identical warm-up traffic of an untrained
    (all delay-sensitive) fleet, then serve the same query batch: every
    service plus a fleet-wide query, repeated. Metrics are the summed
    batch times per method and the relative reduction.
    """
    if not seeds:
        raise ConfigError("at least one seed is required")
    rows: list[MetricRow] = []
    details: dict[str, Any] = {"cells": {}}
    for count in service_counts:
        names = default_services(count)
        for n in n_grid:
            for seed in seeds:
                config = build_scenario(
                    names, n, seed, sim_cycles=warmup_cycles, **(overrides or {})
                )
                qcsm = Gateway(GatewayMode.QCSM, config.cost)
                base = Gateway(GatewayMode.BASELINE, config.cost)
                env = EnvironmentModel(config, gateways=[qcsm, base])
                env.run_cycles(warmup_cycles)
                window = (1, warmup_cycles)
                batch: list[tuple[str | None, ...]] = [(None,)] + [(s,) for s in names]
                times = {METHOD_QCSM: 0.0, METHOD_BASELINE: 0.0}
                for _ in range(query_repeats):
                    for (selector,) in batch:
                        times[METHOD_QCSM] += qcsm.query(selector, window).response_time_ms
                        times[METHOD_BASELINE] += base.query(selector, window).response_time_ms
                for method, total in times.items():
                    rows.append(
                        MetricRow(
                            "response_time", method, count, n,
                            "query_batch_time_ms", total, "ms", seed,
                        )
                    )
                reduction = 100.0 * (
                    (times[METHOD_BASELINE] - times[METHOD_QCSM]) / times[METHOD_BASELINE]
                )
                rows.append(
                    MetricRow(
                        "response_time", METHOD_QCSM, count, n,
                        "response_time_reduction_pct", reduction, "percent", seed,
                    )
                )
                rows.append(
                    MetricRow(
                        "response_time", METHOD_QCSM, count, n,
                        "pool_records", float(len(qcsm.pool)), "count", seed,
                    )
                )
                details["cells"][(count, n, seed)] = {
                    "records": len(qcsm.pool),
                    "config_hash": config_hash(config),
                }
    return ExperimentResult("response_time", rows, aggregate_rows(rows), details)


# Lifetime experiment ------------------------------------------------------


def run_lifetime_experiment(
    seeds: Sequence[int],
    service_counts: Sequence[int] = DEFAULT_SERVICE_COUNTS,
    num_sensors: int = 50,
    duration_cycles: int | None = None,
    overrides: Mapping[str, Any] | None = None,
) -> ExperimentResult:
    """Battery lifetime under the learned assignment against all-sensitive.

    Per seed: train on a fresh environment, walk the published policy to
    its fixed assignment, then measure both managers on identical
    streams for the full scenario duration. Lifetime is reported as the
    remaining battery fraction (1.0 = untouched), overall and grouped by
    each service's natural class. Runs on the steady off-peak request
    profile unless the caller overrides it.
    """
    if not seeds:
        raise ConfigError("at least one seed is required")
    rows: list[MetricRow] = []
    details: dict[str, Any] = {"policies": {}}
    effective = {**LIFETIME_WORKLOAD, **(overrides or {})}
    for count in service_counts:
        names = default_services(count)
        for seed in seeds:
            config = build_scenario(names, num_sensors, seed, **effective)
            cycles = duration_cycles or config.sim_cycles
            trainer = EnvironmentModel(config)
            trained = run_training(
                trainer, config.episodes, config.learning_rate, config.gamma, seed
            )
            start = NetworkState(
                tuple(QosClassId.DELAY_SENSITIVE for _ in config.services)
            )
            target = follow_policy(trained.candidate, trainer, start=start)
            assignment = {
                svc.name: target.assignment[j] for j, svc in enumerate(config.services)
            }
            details["policies"][(count, seed)] = dict(assignment)

            measurements = {}
            for method in (METHOD_QCSM, METHOD_BASELINE):
                env = EnvironmentModel(config)
                if method == METHOD_QCSM:
                    env.fleet.apply_assignment(assignment)
                env.run_cycles(cycles)
                measurements[method] = env.fleet
            for method, fleet in measurements.items():
                groups: dict[str, list[int]] = {"overall": list(range(num_sensors))}
                for svc in config.services:
                    label = natural_class(svc, config).value
                    ids = [node.node_id for node in fleet.service_nodes(svc.name)]
                    groups.setdefault(f"natural={label}", []).extend(ids)
                for label, ids in groups.items():
                    metric = (
                        "normalized_lifetime"
                        if label == "overall"
                        else f"normalized_lifetime[{label}]"
                    )
                    rows.append(
                        MetricRow(
                            "lifetime", method, count, num_sensors,
                            metric, fleet.mean_lifetime(ids), "fraction", seed,
                        )
                    )
            gain = 100.0 * (
                measurements[METHOD_QCSM].mean_lifetime()
                - measurements[METHOD_BASELINE].mean_lifetime()
            ) / measurements[METHOD_BASELINE].mean_lifetime()
            rows.append(
                MetricRow(
                    "lifetime", METHOD_QCSM, count, num_sensors,
                    "lifetime_gain_pct", gain, "percent", seed,
                )
            )
    return ExperimentResult("lifetime", rows, aggregate_rows(rows), details)


# Reward experiment --------------------------------------------------------


def run_reward_experiment(
    seeds: Sequence[int],
    learning_rates: Sequence[float] = DEFAULT_LEARNING_RATES,
    service_count: int = 3,
    num_sensors: int = 50,
    episodes: int | None = None,
    overrides: Mapping[str, Any] | None = None,
) -> ExperimentResult:
    """Cumulative training reward traces across learning rates.

    One trace per (learning rate, seed); the trace is downsampled at
    batch-size boundaries for reporting, and the terminal cumulative
    reward is the headline metric.
    """
    if not seeds:
        raise ConfigError("at least one seed is required")
    names = default_services(service_count)
    rows: list[MetricRow] = []
    details: dict[str, Any] = {"traces": {}}
    for lr in learning_rates:
        method = f"{METHOD_QCSM}(lr={lr:g})"
        for seed in seeds:
            config = build_scenario(names, num_sensors, seed, **(overrides or {}))
            total = episodes or config.episodes
            env = EnvironmentModel(config)
            trained = run_training(env, total, lr, config.gamma, seed)
            trace = trained.reward_trace
            details["traces"][(lr, seed)] = trace
            rows.append(
                MetricRow(
                    "reward", method, service_count, num_sensors,
                    "cumulative_reward_final", float(trace[-1]), "reward", seed,
                )
            )
            for episode in range(config.batch_size - 1, total, config.batch_size):
                rows.append(
                    MetricRow(
                        "reward", method, service_count, num_sensors,
                        f"cumulative_reward@{episode + 1}", float(trace[episode]),
                        "reward", seed,
                    )
                )
    return ExperimentResult("reward", rows, aggregate_rows(rows), details)


EXPERIMENTS = {
    "response": run_response_experiment,
    "lifetime": run_lifetime_experiment,
    "reward": run_reward_experiment,
}

"""Command-line front end.

Exit codes: 0 on success, 2 for invalid arguments or configuration
(diagnostics on stderr), 3 when the output directory cannot be written.
The QCSM_OUT environment variable overrides --out when set. Every
artifact-producing invocation writes exactly one manifest.json next to
its outputs.
"""

from __future__ import annotations

import argparse
import csv
import datetime as _dt
import io
import json
import os
import sys
import time
from pathlib import Path
from typing import Any, Sequence

from .engine import EnvironmentModel, epsilon_schedule, run_training
from .errors import ContractViolation, QcsmError
from .gateway import Gateway, GatewayMode, serve_pool
from .harness import (
    DEFAULT_LEARNING_RATES,
    DEFAULT_N_GRID,
    DEFAULT_SERVICE_COUNTS,
    ExperimentResult,
    run_lifetime_experiment,
    run_response_experiment,
    run_reward_experiment,
    summary_to_csv,
)
from .model import ScenarioConfig, config_hash

try:
    from importlib.metadata import version as _pkg_version

    VERSION = _pkg_version("qcsm")
except Exception:  # pragma: no cover - metadata absent in odd installs
    VERSION = "0.1.0"

FIGURE_FILES = {
    "response": "fig3_response.csv",
    "lifetime": "fig4_lifetime.csv",
    "reward": "fig5_reward.csv",
}

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_OUT_DIR = 3


class Manifest:
    """Run manifest, written exactly once per invocation."""

    def __init__(self, out_dir: Path, command: Sequence[str]):
        self.out_dir = out_dir
        self.data: dict[str, Any] = {
            "command": list(command),
            "version": VERSION,
            "created_utc": _dt.datetime.now(_dt.timezone.utc).isoformat(),
            "config_hash": None,
            "seeds": [],
            "artifacts": [],
            "status": "incomplete",
            "error": None,
            "duration_s": None,
        }
        self._written = False
        self._started = time.monotonic()

    def write(self) -> Path:
        if self._written:
            raise ContractViolation("manifest already written for this invocation")
        self._written = True
        self.data["duration_s"] = round(time.monotonic() - self._started, 3)
        path = self.out_dir / "manifest.json"
        path.write_text(json.dumps(self.data, indent=2, sort_keys=True) + "\n")
        return path


def _resolve_out_dir(flag_value: str) -> Path:
    return Path(os.environ.get("QCSM_OUT") or flag_value)


def _prepare_out_dir(out: Path) -> None:
    """Create the output directory and prove it is writable."""
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write-probe"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as exc:
        raise _OutputDirError(f"output directory {out} is not writable: {exc}") from exc


class _OutputDirError(Exception):
    pass


def _load_config(path: str, strict: bool = True) -> ScenarioConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise QcsmError(f"cannot read config {path}: {exc}") from exc
    return ScenarioConfig.from_json(text, strict=strict)


def _parse_int_list(text: str, flag: str) -> list[int]:
    try:
        return [int(part) for part in text.split(",") if part.strip() != ""]
    except ValueError as exc:
        raise QcsmError(f"{flag} expects a comma-separated integer list, got {text!r}") from exc


def _parse_float_list(text: str, flag: str) -> list[float]:
    try:
        return [float(part) for part in text.split(",") if part.strip() != ""]
    except ValueError as exc:
        raise QcsmError(f"{flag} expects a comma-separated number list, got {text!r}") from exc


# Subcommands ---------------------------------------------------------------


def _cmd_validate(args: argparse.Namespace) -> int:
    config = _load_config(args.config, strict=not args.relaxed)
    print(f"ok: {len(config.services)} services, {config.num_sensors} sensors, "
          f"hash {config_hash(config)[:12]}")
    return EXIT_OK


def _cmd_train(args: argparse.Namespace) -> int:
    config = _load_config(args.config)
    if args.seed is not None:
        config = config.replace(seed=args.seed)
    episodes = args.episodes if args.episodes is not None else config.episodes
    lr = args.lr if args.lr is not None else config.learning_rate
    if episodes < 1:
        raise QcsmError(f"--episodes must be >= 1, got {episodes}")
    if not 0.0 < lr <= 1.0:
        raise QcsmError(f"--lr must lie in (0, 1], got {lr}")
    out = _resolve_out_dir(args.out)
    _prepare_out_dir(out)
    manifest = Manifest(out, getattr(args, "_argv", ["train"]))
    manifest.data["config_hash"] = config_hash(config)
    manifest.data["seeds"] = [config.seed]
    dump_handle = None
    try:
        env = EnvironmentModel(config)
        on_episode = None
        if args.dump_fleet:
            dump_handle = (out / "fleet_dump.ndjson").open("w")

            def on_episode(episode: int, live: EnvironmentModel) -> None:
                dump_handle.write(
                    json.dumps(live.fleet.snapshot_doc(), separators=(",", ":")) + "\n"
                )

        result = run_training(
            env, episodes, lr, config.gamma, config.seed, on_episode=on_episode
        )

        actions = [
            "noop" if a.is_noop else f"{a.service}->{a.qos_class.value}"
            for a in env.actions
        ]
        qtable_doc = {
            "num_states": result.qtable.num_states,
            "num_actions": result.qtable.num_actions,
            "actions": actions,
            "values": result.qtable.values.tolist(),
            "visits": result.qtable.visits.tolist(),
            "policy": {
                str(s): actions[result.qtable.best_action(s)]
                for s in range(result.qtable.num_states)
            },
            "lr": lr,
            "gamma": config.gamma,
            "episodes": episodes,
            "seed": config.seed,
            "config_hash": config_hash(config),
        }
        (out / "qtable.json").write_text(json.dumps(qtable_doc, indent=2) + "\n")

        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator="\n")
        writer.writerow(["episode", "cumulative_reward", "epsilon", "lr", "seed"])
        for episode, value in enumerate(result.reward_trace):
            writer.writerow([
                episode, f"{value:.6f}", f"{epsilon_schedule(episode, episodes):.6f}",
                f"{lr:g}", config.seed,
            ])
        (out / "reward_trace.csv").write_text(buffer.getvalue())

        manifest.data["artifacts"] = ["qtable.json", "reward_trace.csv"]
        if args.dump_fleet:
            manifest.data["artifacts"].append("fleet_dump.ndjson")
        manifest.data["status"] = "ok"
        print(f"trained {episodes} episodes at lr={lr:g}; "
              f"final cumulative reward {result.reward_trace[-1]:.3f}")
        print(f"artifacts in {out}")
        return EXIT_OK
    except BaseException as exc:
        manifest.data["status"] = (
            "incomplete" if isinstance(exc, KeyboardInterrupt) else "failed"
        )
        manifest.data["error"] = repr(exc)
        raise
    finally:
        if dump_handle is not None:
            dump_handle.close()
        manifest.write()


def _cmd_experiment(args: argparse.Namespace) -> int:
    seeds = _parse_int_list(args.seeds, "--seeds")
    if not seeds:
        raise QcsmError("--seeds must name at least one seed")
    overrides: dict[str, Any] | None = None
    base_hash = None
    if args.config is not None:
        base = _load_config(args.config)
        overrides = _scenario_overrides(base)
        base_hash = config_hash(base)
    out = _resolve_out_dir(args.out)
    _prepare_out_dir(out)
    manifest = Manifest(out, getattr(args, "_argv", ["experiment"]))
    manifest.data["seeds"] = seeds
    manifest.data["config_hash"] = base_hash
    try:
        result = _run_figure(args, seeds, overrides)
        csv_name = FIGURE_FILES[args.figure]
        (out / csv_name).write_text(summary_to_csv(result.summary))
        summary_doc = {
            "experiment": result.name,
            "seeds": seeds,
            "headline": _headline(result),
            "rows": len(result.summary),
        }
        summary_name = f"summary_{args.figure}.json"
        (out / summary_name).write_text(json.dumps(summary_doc, indent=2, sort_keys=True) + "\n")
        manifest.data["artifacts"] = [csv_name, summary_name]
        manifest.data["status"] = "ok"
        print(f"{result.name}: {len(result.rows)} measurements over {len(seeds)} seeds")
        for key, value in _headline(result).items():
            print(f"  {key}: {value}")
        print(f"artifacts in {out}")
        return EXIT_OK
    except BaseException as exc:
        manifest.data["status"] = (
            "incomplete" if isinstance(exc, KeyboardInterrupt) else "failed"
        )
        manifest.data["error"] = repr(exc)
        raise
    finally:
        manifest.write()


def _scenario_overrides(config: ScenarioConfig) -> dict[str, Any]:
    """Tunable fields of a base scenario, applied to every grid cell.

    Fleet size, service set, seed, and horizon stay with the experiment;
    everything else follows the provided file.
    """
    return {
        "cycle_ms": config.cycle_ms,
        "churn_probability": config.churn_probability,
        "request_rate": config.request_rate,
        "request_peak_rate": config.request_peak_rate,
        "request_peak_cycles": config.request_peak_cycles,
        "datastore_window_s": config.datastore_window_s,
        "k_drain": config.k_drain,
        "w_kpi": config.w_kpi,
        "w_energy": config.w_energy,
        "episodes": config.episodes,
        "learning_rate": config.learning_rate,
        "gamma": config.gamma,
        "batch_size": config.batch_size,
        "qos_classes": config.qos_classes,
        "device_classes": config.device_classes,
        "cost": config.cost,
    }


def _run_figure(
    args: argparse.Namespace,
    seeds: list[int],
    overrides: dict[str, Any] | None = None,
) -> ExperimentResult:
    if args.figure == "response":
        return run_response_experiment(
            seeds,
            n_grid=tuple(_parse_int_list(args.n_grid, "--n-grid")),
            service_counts=tuple(_parse_int_list(args.service_counts, "--service-counts")),
            warmup_cycles=args.warmup_cycles,
            overrides=overrides,
        )
    if args.figure == "lifetime":
        return run_lifetime_experiment(
            seeds,
            service_counts=tuple(_parse_int_list(args.service_counts, "--service-counts")),
            num_sensors=args.sensors,
            duration_cycles=args.duration_cycles,
            overrides=overrides,
        )
    return run_reward_experiment(
        seeds,
        learning_rates=tuple(_parse_float_list(args.lrs, "--lrs")),
        num_sensors=args.sensors,
        episodes=args.episodes,
        overrides=overrides,
    )


def _headline(result: ExperimentResult) -> dict[str, Any]:
    headline: dict[str, Any] = {}
    for row in result.summary:
        if row.metric == "response_time_reduction_pct":
            headline[f"reduction_pct[J={row.services},n={row.n_sensors}]"] = round(row.value, 2)
        elif row.metric == "lifetime_gain_pct":
            headline[f"lifetime_gain_pct[J={row.services}]"] = round(row.value, 2)
        elif row.metric == "cumulative_reward_final":
            headline[f"final_reward[{row.method}]"] = round(row.value, 2)
    return headline


def _cmd_serve(args: argparse.Namespace) -> int:
    config = _load_config(args.config)
    gateway = Gateway(GatewayMode.QCSM, config.cost)
    env = EnvironmentModel(config, gateways=[gateway])
    env.run_cycles(args.cycles)
    server = serve_pool(gateway, args.host, args.port)
    host, port = server.server_address[:2]
    print(f"serving {len(gateway.pool)} records on http://{host}:{port}/ (Ctrl-C to stop)")
    try:
        while True:
            time.sleep(3600)
    except KeyboardInterrupt:
        print("shutting down")
        return EXIT_OK
    finally:
        server.shutdown()


# Parser --------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="qcsm",
        description="QoS-managed sensor fleet simulator: training, experiments, gateway.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {VERSION}")
    sub = parser.add_subparsers(dest="command", required=True)

    p_validate = sub.add_parser("validate", help="check a scenario config file")
    p_validate.add_argument("--config", required=True, help="path to a scenario JSON file")
    p_validate.add_argument(
        "--relaxed", action="store_true",
        help="accept service counts outside the experiment envelope",
    )
    p_validate.set_defaults(func=_cmd_validate)

    p_train = sub.add_parser("train", help="train a policy on one scenario")
    p_train.add_argument("--config", required=True, help="path to a scenario JSON file")
    p_train.add_argument("--lr", type=float, default=None, help="learning rate override")
    p_train.add_argument("--episodes", type=int, default=None, help="episode count override")
    p_train.add_argument("--seed", type=int, default=None, help="run seed override")
    p_train.add_argument("--out", default="qcsm-out", help="output directory (QCSM_OUT overrides)")
    p_train.add_argument(
        "--dump-fleet", action="store_true",
        help="also write fleet_dump.ndjson: one node-array document per cycle",
    )
    p_train.set_defaults(func=_cmd_train)

    p_exp = sub.add_parser("experiment", help="run one of the three experiments")
    p_exp.add_argument(
        "--figure", required=True, choices=sorted(FIGURE_FILES),
        help="which experiment to run",
    )
    p_exp.add_argument("--seeds", default="0,1,2,3,4", help="comma-separated seed list")
    p_exp.add_argument(
        "--config", default=None,
        help="base scenario file; its tunable fields apply to every grid cell",
    )
    p_exp.add_argument("--out", default="qcsm-out", help="output directory (QCSM_OUT overrides)")
    p_exp.add_argument("--sensors", type=int, default=50, help="fleet size (lifetime/reward)")
    p_exp.add_argument(
        "--n-grid", default=",".join(str(n) for n in DEFAULT_N_GRID),
        help="fleet sizes for the response experiment",
    )
    p_exp.add_argument(
        "--service-counts", default=",".join(str(c) for c in DEFAULT_SERVICE_COUNTS),
        help="service-set sizes to sweep",
    )
    p_exp.add_argument("--warmup-cycles", type=int, default=600, help="ingest warm-up span")
    p_exp.add_argument("--duration-cycles", type=int, default=None, help="lifetime run length")
    p_exp.add_argument("--episodes", type=int, default=None, help="training episodes (reward)")
    p_exp.add_argument(
        "--lrs", default=",".join(str(lr) for lr in DEFAULT_LEARNING_RATES),
        help="learning rates for the reward experiment",
    )
    p_exp.set_defaults(func=_cmd_experiment)

    p_serve = sub.add_parser("serve", help="warm up a pool and serve it over HTTP")
    p_serve.add_argument("--config", required=True, help="path to a scenario JSON file")
    p_serve.add_argument("--cycles", type=int, default=600, help="warm-up cycles before serving")
    p_serve.add_argument("--host", default="127.0.0.1")
    p_serve.add_argument("--port", type=int, default=8080)
    p_serve.set_defaults(func=_cmd_serve)

    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    effective = list(argv) if argv is not None else sys.argv[1:]
    try:
        args = parser.parse_args(effective)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK
    args._argv = effective
    try:
        return args.func(args)
    except _OutputDirError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_OUT_DIR
    except QcsmError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except KeyboardInterrupt:
        print("interrupted", file=sys.stderr)
        return 130


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()

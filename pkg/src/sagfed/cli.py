"""Command-line entry points for simulation, planning, sweeps, and checks.

Four subcommands cover the workflows the library supports end to end:

``simulate``
    Run one experiment config and write metrics, a manifest, and figures.
``optimize``
    Plan a single round for a system state described in a YAML/JSON file.
``sweep``
    Repeat an experiment across one swept parameter and plot the trend.
``validate``
    Check the convergence bound on the exactly-solvable quadratic task.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import yaml

from .constellation import SatellitePass
from .diagnostics import validate_bound
from .figures import layer_share_bars, render_run_figures, sweep_curve
from .harness import (
    SCHEMES,
    ExperimentConfig,
    export_metrics,
    layer_shares,
    replay_ledger,
    run_experiment,
    time_to_target,
)
from .latency import ClusterState, DeviceState, SaginState
from .linkmodel import PayloadSizes
from .offload import optimize_round


def _load_config(path: str | None, overrides: dict) -> ExperimentConfig:
    config = ExperimentConfig.load(path) if path else ExperimentConfig()
    filtered = {k: v for k, v in overrides.items() if v is not None}
    return replace(config, **filtered) if filtered else config


def _cmd_simulate(args: argparse.Namespace) -> int:
    config = _load_config(
        args.config,
        {
            "scheme": args.scheme,
            "seed": args.seed,
            "rounds": args.rounds,
            "target_accuracy": args.target,
        },
    )
    reports, _ = run_experiment(config)
    final = reports[-1]
    print(
        f"{config.scheme}: {len(reports)} rounds, "
        f"{final.sim_time_s:.1f} s simulated, "
        f"accuracy {final.accuracy:.4f}, loss {final.loss:.4f}"
    )
    if args.out:
        paths = export_metrics(reports, args.out, config)
        paths.extend(render_run_figures(args.out))
        for p in paths:
            print(f"wrote {p}")
    return 0


def _numeric(value):
    # YAML 1.1 reads unsigned exponents like 1.0e9 as strings; repair them.
    if isinstance(value, str):
        try:
            return float(value)
        except ValueError:
            return value
    if isinstance(value, dict):
        return {k: _numeric(v) for k, v in value.items()}
    if isinstance(value, list):
        return [_numeric(v) for v in value]
    return value


def _state_from_dict(raw: dict) -> SaginState:
    data = _numeric(raw)
    passes = tuple(SatellitePass(**p) for p in data.get("passes", []))
    clusters = []
    for cluster in data["clusters"]:
        devices = tuple(DeviceState(**d) for d in cluster.pop("devices"))
        clusters.append(ClusterState(devices=devices, **cluster))
    return SaginState(
        space_samples=float(data.get("space_samples", 0.0)),
        passes=passes,
        clusters=tuple(clusters),
        payload=PayloadSizes(**data["payload"]),
    )


def _loop_iteration_totals(trace) -> dict[str, int]:
    totals: dict[str, int] = {}
    for stat in trace.loops:
        totals[stat.name] = totals.get(stat.name, 0) + stat.iterations
    return totals


def _cmd_optimize(args: argparse.Namespace) -> int:
    data = yaml.safe_load(Path(args.state).read_text())
    state = _state_from_dict(data)
    result = optimize_round(state, args.epsilon1, args.epsilon2)
    plan, latency = result.plan, result.latency
    payload = {
        "direction": plan.direction,
        "s2a": np.asarray(plan.s2a).tolist(),
        "a2s": np.asarray(plan.a2s).tolist(),
        "a2g": [np.asarray(a).tolist() for a in plan.a2g],
        "g2a": [np.asarray(g).tolist() for g in plan.g2a],
        "latency": {
            "tau_space": latency.tau_space,
            "tau_air": list(latency.tau_air),
            "tau_total": latency.tau_total,
        },
        "loop_iterations": _loop_iteration_totals(result.trace),
    }
    text = json.dumps(payload, indent=2)
    if args.out:
        Path(args.out).write_text(text + "\n")
        print(f"wrote {args.out}")
    else:
        print(text)
    return 0


def _cmd_sweep(args: argparse.Namespace) -> int:
    config = _load_config(args.config, {"seed": args.seed, "rounds": args.rounds})
    values = [float(v) for v in args.values]
    out = Path(args.out) if args.out else None
    if out:
        out.mkdir(parents=True, exist_ok=True)

    rows: list[tuple] = []
    if args.param == "alpha":
        times = []
        for value in values:
            swept = replace(config, alpha=value, target_accuracy=args.target)
            reports, _ = run_experiment(swept)
            reached = time_to_target(reports, args.target)
            times.append(reached)
            rows.append((value, reached))
            print(f"alpha={value:g}: time-to-{args.target:.0%} = {reached:.1f} s")
        if out:
            sweep_curve(
                values,
                [t if math.isfinite(t) else float("nan") for t in times],
                "offloadable fraction",
                f"time to {args.target:.0%} accuracy (s)",
                out / "sweep_alpha.png",
            )
    else:
        field_map = {
            "space-cpu": ("space_cpu_hz_low", "space_cpu_hz_high"),
            "air-cpu": ("air_cpu_hz",),
        }
        shares_by_value = {}
        for value in values:
            swept = replace(config, **{f: value for f in field_map[args.param]})
            ledger = replay_ledger(swept, swept.rounds)
            shares = layer_shares(ledger)
            shares_by_value[value] = shares
            rows.append((value, shares["space"], shares["air"], shares["ground"]))
            print(
                f"{args.param}={value:g}: space={shares['space']:.3f} "
                f"air={shares['air']:.3f} ground={shares['ground']:.3f}"
            )
        if out:
            layer_share_bars(
                shares_by_value, args.param.replace("-", " ") + " (Hz)",
                out / f"sweep_{args.param.replace('-', '_')}.png",
            )
    if out:
        header = (
            "value,time_to_target_s"
            if args.param == "alpha"
            else "value,space_share,air_share,ground_share"
        )
        lines = [header] + [",".join(repr(c) for c in row) for row in rows]
        (out / "sweep.csv").write_text("\n".join(lines) + "\n")
        print(f"wrote {out / 'sweep.csv'}")
    return 0


def _cmd_validate(args: argparse.Namespace) -> int:
    report = validate_bound(
        seeds=range(args.seeds), rounds=args.rounds,
        local_iterations=args.local_iterations,
    )
    report["pass"] = report.pop("all_hold")
    text = json.dumps(report, indent=2)
    if args.out:
        Path(args.out).write_text(text + "\n")
        print(f"wrote {args.out}")
    else:
        print(text)
    return 0 if report["pass"] else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sagfed",
        description="Federated learning over space-air-ground networks",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="run one experiment")
    sim.add_argument("--config", help="YAML experiment config")
    sim.add_argument("--scheme", choices=SCHEMES)
    sim.add_argument("--seed", type=int)
    sim.add_argument("--rounds", type=int)
    sim.add_argument("--target", type=float, help="stop at this test accuracy")
    sim.add_argument("--out", help="directory for metrics, manifest, figures")
    sim.set_defaults(func=_cmd_simulate)

    opt = sub.add_parser("optimize", help="plan one round for a saved state")
    opt.add_argument("--state", required=True, help="YAML/JSON system state")
    opt.add_argument("--epsilon1", type=float, default=1e-3)
    opt.add_argument("--epsilon2", type=float, default=1e-3)
    opt.add_argument("--out", help="write the plan JSON here instead of stdout")
    opt.set_defaults(func=_cmd_optimize)

    swp = sub.add_parser("sweep", help="repeat a run across one parameter")
    swp.add_argument(
        "--param", required=True, choices=("alpha", "space-cpu", "air-cpu")
    )
    swp.add_argument("--values", required=True, nargs="+")
    swp.add_argument("--config", help="YAML experiment config")
    swp.add_argument("--seed", type=int)
    swp.add_argument("--rounds", type=int)
    swp.add_argument("--target", type=float, default=0.9)
    swp.add_argument("--out", help="directory for the sweep CSV and figure")
    swp.set_defaults(func=_cmd_sweep)

    val = sub.add_parser("validate", help="check the convergence bound")
    val.add_argument("--config", help="accepted for symmetry; seeds drive the check")
    val.add_argument("--seeds", type=int, default=20)
    val.add_argument("--rounds", type=int, default=30)
    val.add_argument("--local-iterations", type=int, default=4)
    val.add_argument("--out", help="write the JSON report here")
    val.set_defaults(func=_cmd_validate)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())

"""Command line entry point: ``tabletop-agent <command>``.

Exit status: 0 when the command ran (a failed task is data, not an error),
1 on replay mismatch or other internal error, 2 on configuration errors,
3 on backend transport errors.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from .controller import ActionCache
from .errors import AgentError, ConfigError, SinkError, TransportError
from .harness import (
    GridSweep,
    TrajectorySink,
    collect_dataset,
    load_config,
    replay_trajectory,
    run_benchmark,
    run_episode,
)
from .harness.config import RunConfig
from .harness.trajectory import default_thresholds
from .simworld import BUILTIN_SCENARIOS, Region

DEFAULT_CONFIG = "tabletop_agent.toml"
EXIT_OK, EXIT_INTERNAL, EXIT_CONFIG, EXIT_TRANSPORT = 0, 1, 2, 3


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help=f"TOML config file (default: ./{DEFAULT_CONFIG} if present)")
    p.add_argument("--backend", help="default backend for every role: scripted:oracle, scripted:<file>, live:<url>")
    p.add_argument("--seed", type=int)
    p.add_argument("--jitter", type=float, help="detector center jitter sigma in meters")
    p.add_argument("--drop", type=float, help="detector drop probability")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tabletop-agent", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run one episode and print its transcript")
    _common(p)
    p.add_argument("--task", help="task instruction (default: the scenario's task)")
    p.add_argument("--scenario", help="built-in scenario name or scenario file")
    p.add_argument("--json", action="store_true", help="print a JSON summary instead of text")

    p = sub.add_parser("bench", help="run a benchmark suite and print the success-rate table")
    _common(p)
    p.add_argument("--scenario", default="all", help="'all' or comma-separated scenario names")
    p.add_argument("--episodes", type=int, default=24)
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--json-out", help="also write the results as JSON to this path")

    p = sub.add_parser("collect", help="automated data collection over a reset grid")
    _common(p)
    p.add_argument("--scenario", help="built-in scenario name or scenario file")
    p.add_argument("--out", required=True, help="output directory for trajectory files")
    p.add_argument("--grid", default="5x5", help="NXxNY grid over the subject's spawn region, or 'random'")
    p.add_argument("--target", type=int, help="stop after this many valid trajectories")
    p.add_argument("--unreachable", action="append", default=[], metavar="X,Y,HALF",
                   help="unreachable column around (X, Y); repeatable")

    p = sub.add_parser("replay", help="re-execute trajectory files and compare final states")
    p.add_argument("paths", nargs="+")
    p.add_argument("--tol", type=float, default=0.0)

    p = sub.add_parser("cache-inspect", help="list the entries of an action cache file")
    p.add_argument("path")
    return parser


def _config(args) -> RunConfig:
    path = args.config
    if path is None and Path(DEFAULT_CONFIG).exists():
        path = DEFAULT_CONFIG
    if path is None and not args.backend:
        raise ConfigError(f"no config file given, ./{DEFAULT_CONFIG} not found and no --backend set")
    config = load_config(path)
    changes = {}
    if args.backend:
        changes["backends"] = {**config.backends, "default": args.backend}
    if args.seed is not None:
        changes["seed"] = args.seed
    if getattr(args, "scenario", None) and args.scenario != "all" and "," not in args.scenario:
        changes["scenario"] = args.scenario
    if getattr(args, "task", None):
        changes["task"] = args.task
    if args.jitter is not None or args.drop is not None:
        changes["noise"] = dataclasses.replace(
            config.noise,
            center_jitter_sigma_m=config.noise.center_jitter_sigma_m if args.jitter is None else args.jitter,
            drop_prob=config.noise.drop_prob if args.drop is None else args.drop,
        )
    try:
        return dataclasses.replace(config, **changes).validate() if changes else config
    except ValueError as e:
        raise ConfigError(str(e)) from e


def cmd_run(args) -> int:
    config = _config(args)
    scenario = config.load_scenario()
    result = run_episode(config.task or scenario.task, scenario, config)
    if args.json:
        print(json.dumps({
            "task": result.task_text,
            "success": result.success,
            "verdict": result.final_verdict,
            "termination": result.termination,
            "subtasks": [st.text for st, _ in result.subtask_transcript],
            "backend_calls": result.backend_call_count,
            "cache_hits": result.cache_hits,
            "wall_time": result.wall_time,
            "error": result.error,
        }))
    else:
        print("\n".join(result.transcript_lines()))
    if result.error.startswith("TransportError"):
        return EXIT_TRANSPORT
    return EXIT_OK


def cmd_bench(args) -> int:
    config = _config(args)
    names = ["all"] if args.scenario == "all" else [s.strip() for s in args.scenario.split(",")]
    for n in names:
        if n != "all" and n not in BUILTIN_SCENARIOS and not Path(n).exists():
            raise ConfigError(f"unknown scenario {n!r}")
    result = run_benchmark(names, args.episodes, args.repeats, config)
    print(result.table())
    print(f"backend calls {result.backend_calls}, cache hits {result.cache_hits}")
    if args.json_out:
        Path(args.json_out).write_text(result.to_json())
    if result.errors.get("TransportError"):
        return EXIT_TRANSPORT
    return EXIT_OK


def _unreachable(specs: Sequence[str]) -> tuple[Region, ...]:
    out = []
    for s in specs:
        try:
            x, y, half = (float(v) for v in s.split(","))
        except ValueError:
            raise ConfigError(f"--unreachable expects X,Y,HALF, got {s!r}") from None
        out.append(Region.column(x, y, half))
    return tuple(out)


def cmd_collect(args) -> int:
    config = _config(args)
    if args.unreachable:
        config = dataclasses.replace(config, unreachable=config.unreachable + _unreachable(args.unreachable))
    scenario = config.load_scenario()
    if args.grid == "random":
        if args.target is None:
            raise ConfigError("--grid random needs --target")
        policy = "random"
    else:
        try:
            nx, ny = (int(v) for v in args.grid.lower().split("x"))
        except ValueError:
            raise ConfigError(f"--grid expects NXxNY or 'random', got {args.grid!r}") from None
        policy = GridSweep.for_scenario(scenario, nx, ny)
    sink = TrajectorySink(Path(args.out), scenario.camera, default_thresholds(scenario, config.grasp_radius))
    stats = collect_dataset(scenario, policy, args.target, config, sink)
    print("\n".join(stats.lines()))
    print(f"wrote {len(sink.written)} trajectories to {args.out}")
    return EXIT_OK


def cmd_replay(args) -> int:
    status = EXIT_OK
    for path in args.paths:
        diffs = replay_trajectory(path, args.tol)
        if diffs:
            status = EXIT_INTERNAL
            print(f"MISMATCH {path}")
            for d in diffs:
                print(f"  {d}")
        else:
            print(f"ok       {path}")
    return status


def cmd_cache_inspect(args) -> int:
    if not Path(args.path).exists():
        raise ConfigError(f"cache file not found: {args.path}")
    cache = ActionCache.load(args.path)
    for rec in cache.to_records():
        print(f"{rec['prompt']!r}: {rec['skill_name']}, {len(rec['steps'])} steps")
    print(f"{len(cache)} entries")
    return EXIT_OK


COMMANDS = {
    "run": cmd_run,
    "bench": cmd_bench,
    "collect": cmd_collect,
    "replay": cmd_replay,
    "cache-inspect": cmd_cache_inspect,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except TransportError as e:
        print(f"transport error: {e}", file=sys.stderr)
        return EXIT_TRANSPORT
    except (SinkError, AgentError, OSError, ValueError) as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())

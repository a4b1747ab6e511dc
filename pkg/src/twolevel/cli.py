"""Command-line front end.

Subcommands:
    run-l0     one coarse (Level 0) run
    run-l1     standalone fine instance on a scenario directory, or client
               mode when a coupling port is given
    run-multi  coarse run plus a spawn schedule (multi-level)
    sweep      grid of cells x repetitions, CSV metrics

Heavy imports happen inside the handlers: `run-l1` is also the entry point
of every spawned fine instance and must start fast.
"""

from __future__ import annotations

import argparse
import json
import sys


def _int_list(text: str) -> list[int]:
    return [int(v) for v in text.split(",") if v]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="twolevel",
                                     description="two-level IoT territory simulator")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, multi_valued=False):
        to_list = _int_list if multi_valued else int
        p.add_argument("--ses", type=to_list, default=1000 if not multi_valued else [1000],
                       help="number of simulated entities" + (" (comma list)" if multi_valued else ""))
        p.add_argument("--workers", type=to_list, default=1 if not multi_valued else [1],
                       help="number of logical processes" + (" (comma list)" if multi_valued else ""))
        p.add_argument("--cache", type=to_list, default=0 if not multi_valued else [0],
                       help="dedup cache capacity, 0 disables" + (" (comma list)" if multi_valued else ""))
        p.add_argument("--seed", type=int, default=1, help="base random seed")
        p.add_argument("--steps", type=int, default=900, help="coarse timesteps")
        p.add_argument("--gen-prob", type=float, default=None,
                       help="per-entity per-step message generation probability")
        p.add_argument("--adaptive", action="store_true",
                       help="enable adaptive partitioning")
        p.add_argument("--out", metavar="CSV", default=None,
                       help="write run metrics CSV (per-step file alongside)")

    p = sub.add_parser("run-l0", help="single coarse run")
    common(p)

    p = sub.add_parser("run-l1", help="fine instance on a scenario directory")
    p.add_argument("scenario_dir", help="directory containing scenario.txt")
    p.add_argument("port", nargs="?", type=int, default=None,
                   help="coupling port; when given, run as a Level 1 client")
    p.add_argument("--steps", type=int, default=1,
                   help="coarse steps to run in standalone mode")
    p.add_argument("--seed", type=int, default=0, help="standalone-mode seed")

    p = sub.add_parser("run-multi", help="coarse run with a spawn schedule")
    common(p)
    p.add_argument("--spawn-schedule", metavar="FILE", required=True,
                   help="JSON spawn schedule")
    p.add_argument("--in-process", action="store_true",
                   help="run fine instances as threads instead of processes")

    p = sub.add_parser("sweep", help="grid of experiment cells")
    common(p, multi_valued=True)
    p.add_argument("--reps", type=int, default=1, help="repetitions per cell")
    p.add_argument("--spawn-schedule", metavar="FILE", default=None)
    p.add_argument("--name", default="sweep")
    return parser


def _cmd_run_l1(args) -> int:
    if args.port is not None:
        from .coupling import run_fine_client
        run_fine_client(args.scenario_dir, args.port)
        return 0
    from .level1 import FineSim, load_scenario
    scenario = load_scenario(args.scenario_dir)
    sim = FineSim(scenario, seed=args.seed)
    report = None
    for _ in range(args.steps):
        report = sim.run_until(sim.fine_clock + scenario.coarse_step_length)
    print(json.dumps(report.to_payload(), sort_keys=True))
    return 0


def _cmd_run_l0(args) -> int:
    from .harness import ExperimentSpec, format_summary, run_experiment, summarize
    spec = ExperimentSpec(
        name="run-l0",
        base=dict(num_entities=args.ses, workers=args.workers, cache=args.cache,
                  steps=args.steps, gen_prob=args.gen_prob, adaptive=args.adaptive),
        base_seed=args.seed,
        out=args.out,
    )
    records = run_experiment(spec)
    print(format_summary(summarize(records)))
    return 0 if all(r.ok for r in records) else 1


def _cmd_run_multi(args) -> int:
    from .harness import ExperimentSpec, format_summary, run_experiment, summarize
    from .multilevel import load_spawn_schedule
    spec = ExperimentSpec(
        name="run-multi",
        base=dict(num_entities=args.ses, workers=args.workers, cache=args.cache,
                  steps=args.steps, gen_prob=args.gen_prob, adaptive=args.adaptive),
        base_seed=args.seed,
        spawn_schedule=load_spawn_schedule(args.spawn_schedule),
        in_process=args.in_process,
        out=args.out,
    )
    records = run_experiment(spec)
    for r in records:
        for t in r.spawn_timings:
            print(f"spawn instance={t.instance_id} step={t.step} "
                  f"launch={t.launch_seconds:.3f}s blocked={t.blocked_seconds:.3f}s")
    print(format_summary(summarize(records)))
    return 0 if all(r.ok for r in records) else 1


def _cmd_sweep(args) -> int:
    from .harness import ExperimentSpec, format_summary, run_experiment, summarize
    from .multilevel import load_spawn_schedule
    schedule = load_spawn_schedule(args.spawn_schedule) if args.spawn_schedule else []
    spec = ExperimentSpec(
        name=args.name,
        base=dict(steps=args.steps, gen_prob=args.gen_prob, adaptive=args.adaptive),
        axes={"num_entities": args.ses, "workers": args.workers, "cache": args.cache},
        repetitions=args.reps,
        base_seed=args.seed,
        spawn_schedule=schedule,
        out=args.out,
    )
    records = run_experiment(spec)
    print(format_summary(summarize(records)))
    return 0 if all(r.ok for r in records) else 1


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    handler = {
        "run-l0": _cmd_run_l0,
        "run-l1": _cmd_run_l1,
        "run-multi": _cmd_run_multi,
        "sweep": _cmd_sweep,
    }[args.command]
    return handler(args)


if __name__ == "__main__":
    sys.exit(main())

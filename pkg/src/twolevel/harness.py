"""Experiment runner: sweeps, repetitions, CSV metrics.

Cells run sequentially so timing measurements do not perturb each other;
each repetition uses seed = base seed + repetition index.  Two flat CSV
files are emitted: one row per (cell, repetition) with aggregate counters,
and a long-format per-step file.  Headers are normative (see README).
"""

from __future__ import annotations

import csv
import itertools
import statistics
import tempfile
import time
from dataclasses import dataclass, field

from .dissemination import PbBConfig
from .level0 import CoarseWorld, ModelConfig, StepStats, build_world, totals
from .multilevel import SpawnSpec, run_multilevel

RUNS_HEADER = [
    "name", "num_entities", "num_workers", "cache_capacity", "adaptive",
    "gen_prob", "total_steps", "spawns", "repetition", "seed", "ok",
    "wct_seconds", "originated", "delivered", "forwarded",
    "discarded_by_cache", "interworker", "migrations", "peak_rss_kb", "error",
]
STEPS_HEADER = [
    "name", "repetition", "seed", "step", "originated", "delivered",
    "forwarded", "discarded_by_cache", "interworker", "migrations",
]

COUNTER_COLUMNS = ["originated", "delivered", "forwarded",
                   "discarded_by_cache", "interworker", "migrations"]


def peak_rss_kb() -> int | None:
    """Best-effort peak resident set size; platform-reported, may be None."""
    try:
        import resource
        return int(resource.getrusage(resource.RUSAGE_SELF).ru_maxrss)
    except Exception:
        return None


def make_config(num_entities: int, *, workers: int = 1, cache: int = 0,
                steps: int = 900, gen_prob: float | None = None,
                adaptive: bool = False, seed: int = 1,
                rebalance_period: int = 25) -> ModelConfig:
    pbb = PbBConfig() if gen_prob is None else PbBConfig(generation_probability=gen_prob)
    return ModelConfig(
        num_entities=num_entities,
        total_steps=steps,
        pbb=pbb,
        cache_capacity=cache,
        num_workers=workers,
        adaptive_partitioning=adaptive,
        rebalance_period=rebalance_period,
        seed=seed,
    )


@dataclass
class ExperimentSpec:
    name: str
    base: dict = field(default_factory=dict)   # make_config keyword overrides
    axes: dict = field(default_factory=dict)   # field -> list of values
    repetitions: int = 1
    spawn_schedule: list[SpawnSpec] = field(default_factory=list)
    out: str | None = None                     # runs CSV path; steps CSV derived
    in_process: bool = False
    base_seed: int = 1

    def cells(self) -> list[dict]:
        if not self.axes:
            return [dict(self.base)]
        keys = sorted(self.axes)
        out = []
        for combo in itertools.product(*(self.axes[k] for k in keys)):
            cell = dict(self.base)
            cell.update(dict(zip(keys, combo)))
            out.append(cell)
        return out


@dataclass
class RunRecord:
    name: str
    cell: dict
    repetition: int
    seed: int
    ok: bool
    wct_seconds: float = 0.0
    totals: dict = field(default_factory=dict)
    per_step: list[StepStats] = field(default_factory=list)
    spawn_timings: list = field(default_factory=list)
    peak_rss_kb: int | None = None
    error: str = ""

    def runs_row(self) -> list:
        t = self.totals
        return [
            self.name, self.cell.get("num_entities"), self.cell.get("workers", 1),
            self.cell.get("cache", 0), int(bool(self.cell.get("adaptive", False))),
            self.cell.get("gen_prob", PbBConfig().generation_probability),
            self.cell.get("steps", 900), len(self.spawn_timings),
            self.repetition, self.seed, int(self.ok),
            f"{self.wct_seconds:.6f}",
            t.get("originated", ""), t.get("delivered", ""), t.get("forwarded", ""),
            t.get("discarded_by_cache", ""), t.get("interworker", ""),
            t.get("migrations", ""), self.peak_rss_kb or "", self.error,
        ]


def run_cell(name: str, cell: dict, repetition: int, base_seed: int,
             spawn_schedule: list[SpawnSpec] | None = None,
             in_process: bool = False) -> RunRecord:
    """One simulation run; never raises, failures are recorded."""
    seed = base_seed + repetition
    params = dict(cell)
    params["seed"] = seed
    record = RunRecord(name=name, cell=cell, repetition=repetition, seed=seed, ok=False)
    try:
        config = make_config(**params)
        t0 = time.perf_counter()
        with build_world(config) as world:
            if spawn_schedule:
                base_dir = tempfile.mkdtemp(prefix="twolevel-l1-")
                runner = run_multilevel(world, spawn_schedule, base_dir,
                                        in_process=in_process)
                record.spawn_timings = runner.timings
            else:
                world.run()
            record.per_step = world.stats_history
        record.wct_seconds = time.perf_counter() - t0
        record.totals = totals(record.per_step)
        record.peak_rss_kb = peak_rss_kb()
        record.ok = True
    except Exception as exc:  # failed cells must not kill the sweep
        record.error = f"{type(exc).__name__}: {exc}"
    return record


def run_experiment(spec: ExperimentSpec, verbose: bool = True) -> list[RunRecord]:
    """Run every (cell, repetition); records are written incrementally when
    an output path is configured."""
    records = []
    runs_writer = steps_writer = None
    runs_fh = steps_fh = None
    if spec.out:
        runs_fh = open(spec.out, "w", newline="")
        runs_writer = csv.writer(runs_fh)
        runs_writer.writerow(RUNS_HEADER)
        steps_path = steps_csv_path(spec.out)
        steps_fh = open(steps_path, "w", newline="")
        steps_writer = csv.writer(steps_fh)
        steps_writer.writerow(STEPS_HEADER)
    try:
        for cell in spec.cells():
            for rep in range(spec.repetitions):
                record = run_cell(spec.name, cell, rep, spec.base_seed,
                                  spec.spawn_schedule, spec.in_process)
                records.append(record)
                if verbose:
                    status = "ok" if record.ok else f"FAILED ({record.error})"
                    print(f"[{spec.name}] cell={cell} rep={rep} "
                          f"wct={record.wct_seconds:.2f}s {status}")
                if runs_writer:
                    runs_writer.writerow(record.runs_row())
                    runs_fh.flush()
                    for s in record.per_step:
                        steps_writer.writerow([
                            spec.name, rep, record.seed, s.step, s.originated,
                            s.delivered, s.forwarded, s.discarded_by_cache,
                            s.interworker, s.migrations])
                    steps_fh.flush()
    finally:
        if runs_fh:
            runs_fh.close()
        if steps_fh:
            steps_fh.close()
    return records


def steps_csv_path(runs_path: str) -> str:
    if runs_path.endswith(".csv"):
        return runs_path[:-4] + "_steps.csv"
    return runs_path + "_steps"


def _cell_key(record: RunRecord) -> tuple:
    return tuple(sorted(record.cell.items())) + (("spawns", len(record.spawn_timings)),)


def summarize(records: list[RunRecord]) -> list[dict]:
    """Per-cell means and standard deviations, plus derived columns:
    speedup against the matching 1-worker cell and delta-WCT (multi-level
    overhead) against the matching spawn-free cell, when those cells exist.
    Records from several experiments may be summarized together."""
    cells: dict[tuple, list[RunRecord]] = {}
    for r in records:
        cells.setdefault(_cell_key(r), []).append(r)
    rows = []
    for key, recs in sorted(cells.items()):
        good = [r for r in recs if r.ok]
        if not good:
            print(f"warning: cell {dict(key)} has no successful runs, omitted")
            continue
        wcts = [r.wct_seconds for r in good]
        row = {
            "cell": dict(key),
            "runs": len(good),
            "failed": len(recs) - len(good),
            "wct_mean": statistics.fmean(wcts),
            "wct_std": statistics.pstdev(wcts) if len(wcts) > 1 else 0.0,
        }
        for col in COUNTER_COLUMNS:
            row[f"{col}_mean"] = statistics.fmean(r.totals.get(col, 0) for r in good)
        rows.append(row)
    by_cell = {tuple(sorted(r["cell"].items())): r for r in rows}

    def lookup(cell: dict, **overrides):
        probe = dict(cell)
        probe.update(overrides)
        return by_cell.get(tuple(sorted(probe.items())))

    for row in rows:
        cell = row["cell"]
        ref = lookup(cell, workers=1)
        if ref is not None and row["wct_mean"] > 0:
            row["speedup"] = ref["wct_mean"] / row["wct_mean"]
        if cell.get("spawns"):
            base = lookup(cell, spawns=0)
            if base is not None:
                row["delta_wct"] = row["wct_mean"] - base["wct_mean"]
    return rows


def format_summary(rows: list[dict]) -> str:
    lines = []
    for row in rows:
        cell = ", ".join(f"{k}={v}" for k, v in sorted(row["cell"].items()))
        parts = [f"wct={row['wct_mean']:.3f}s (std {row['wct_std']:.3f})"]
        for col in COUNTER_COLUMNS:
            mean = row[f"{col}_mean"]
            if mean:
                parts.append(f"{col}={mean:.0f}")
        if "speedup" in row:
            parts.append(f"speedup={row['speedup']:.2f}")
        if "delta_wct" in row:
            parts.append(f"delta_wct={row['delta_wct']:.3f}s")
        lines.append(f"{cell}: " + " ".join(parts))
    return "\n".join(lines)

"""Modeler-triggered multi-level runs: a coarse world plus a spawn schedule.

Each schedule entry hands a few entities to a fresh fine instance at a given
step boundary.  While an instance runs, Level 0 computes its own step phases
for the remaining entities, but the boundary is committed only after every
running instance has delivered its StateReport; decisions (Continue/End) are
taken there, and ending instances are reabsorbed before the commit.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

from . import coupling
from .coupling import CONTINUE, END, InstanceHandle, InstanceStatus
from .geometry import ConfigError
from .level0 import CoarseWorld
from .level1 import FineScenario, grid_scenario


@dataclass
class SpawnSpec:
    """One scheduled handoff: entities leave before `step` runs and return
    after `duration` coarse steps of fine simulation."""
    step: int
    worker: int = 0
    entities: int | list[int] = 1
    duration: int = 1
    template: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"step": self.step, "worker": self.worker, "entities": self.entities,
                "duration": self.duration, "template": self.template}


def load_spawn_schedule(path: str) -> list[SpawnSpec]:
    """Schedule file: a JSON array of objects with the SpawnSpec fields."""
    with open(path, encoding="utf-8") as fh:
        raw = json.load(fh)
    if not isinstance(raw, list):
        raise ConfigError(f"{path}: spawn schedule must be a JSON array")
    out = []
    for i, rec in enumerate(raw):
        try:
            out.append(SpawnSpec(
                step=int(rec["step"]),
                worker=int(rec.get("worker", 0)),
                entities=rec.get("entities", 1),
                duration=int(rec.get("duration", 1)),
                template=dict(rec.get("template", {})),
            ))
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"{path}: bad schedule entry {i}: {exc}") from exc
    return out


def select_entities(world: CoarseWorld, spec: SpawnSpec) -> list[int]:
    """Resolve a schedule entry to concrete entity ids (lowest active ids
    owned by the requested worker, unless given explicitly)."""
    if isinstance(spec.entities, list):
        return list(spec.entities)
    if spec.worker >= len(world.lps):
        raise ConfigError(f"spawn at step {spec.step}: no worker {spec.worker}")
    owned = [eid for eid in sorted(world.lps[spec.worker].entity_ids)
             if world.entities[eid].active]
    if len(owned) < spec.entities:
        raise ConfigError(
            f"spawn at step {spec.step}: worker {spec.worker} owns only "
            f"{len(owned)} active entities, need {spec.entities}")
    return owned[: spec.entities]


def build_scenario(world: CoarseWorld, entity_ids: list[int], template: dict) -> FineScenario:
    """Market scenario for a handoff: pedestrians are the handed-off entities,
    placed along the grid's west edge, all targeting the far-corner seller."""
    rows = int(template.get("rows", 10))
    cols = int(template.get("cols", 10))
    spacing = float(template.get("spacing", 10.0))
    scenario = grid_scenario(
        rows=rows, cols=cols, spacing=spacing,
        radio_factor=float(template.get("radio_factor", 1.5)),
        walk_speed=template.get("walk_speed"),
        coarse_step_length=float(template.get("coarse_step_length", 1.0)),
        fine_ticks=int(template.get("fine_ticks", 100)),
    )
    target = scenario.sellers[-1][0]
    for i, eid in enumerate(entity_ids):
        y = (i % rows) * spacing
        scenario.pedestrians.append((eid, -spacing / 2.0, y, target))
    scenario.validate()
    return scenario


@dataclass
class SpawnTiming:
    instance_id: int
    step: int
    launch_seconds: float
    blocked_seconds: float = 0.0


class ConservationError(coupling.CouplingError):
    """Entity conservation failure; aborts the run loud."""


class MultiLevelRunner:
    """Drives a CoarseWorld to completion while honoring a spawn schedule."""

    def __init__(self, world: CoarseWorld, schedule: list[SpawnSpec], base_dir: str,
                 *, in_process: bool = False, timeout: float = coupling.DEFAULT_TIMEOUT):
        for spec in schedule:
            if not 0 <= spec.step < world.config.total_steps:
                raise ConfigError(f"spawn step {spec.step} outside the run")
            if spec.duration < 1:
                raise ConfigError(f"spawn duration must be >= 1, got {spec.duration}")
        self.world = world
        self.schedule = sorted(schedule, key=lambda s: (s.step, s.worker))
        self.base_dir = base_dir
        self.in_process = in_process
        self.timeout = timeout
        self.running: list[tuple[InstanceHandle, int]] = []  # (handle, duration)
        self.timings: list[SpawnTiming] = []
        self.conservation_ok = True
        self._next_instance = 0

    def _check_conservation(self) -> None:
        total = self.world.active_count + sum(
            len(h.entity_ids) for h, _ in self.running
            if h.status is InstanceStatus.RUNNING)
        if total != self.world.config.num_entities:
            self.conservation_ok = False
            raise ConservationError(
                f"entity conservation violated at step {self.world.clock}: "
                f"{total} != {self.world.config.num_entities}")

    def _spawn_due(self) -> None:
        due = [s for s in self.schedule if s.step == self.world.clock]
        if not due:
            return
        started = []
        for spec in due:
            entity_ids = select_entities(self.world, spec)
            scenario = build_scenario(self.world, entity_ids, spec.template)
            iid = self._next_instance
            self._next_instance += 1
            t0 = time.perf_counter()
            handle = coupling.begin_spawn(
                self.world, entity_ids, scenario, self.base_dir, iid,
                in_process=self.in_process)
            started.append((handle, spec, t0))
        # Complete after all launches so concurrent spawns boot in parallel.
        for handle, spec, t0 in started:
            coupling.complete_spawn(self.world, handle, self.timeout)
            self.timings.append(SpawnTiming(
                handle.instance_id, spec.step, time.perf_counter() - t0))
            self.running.append((handle, spec.duration))

    def _boundary_hook(self, world: CoarseWorld) -> None:
        still = []
        for handle, duration in self.running:
            t0 = time.perf_counter()
            coupling.recv_report(handle, self.timeout)
            decision = END if handle.reports_received >= duration else CONTINUE
            coupling.boundary_sync(world, handle, decision, self.timeout)
            blocked = time.perf_counter() - t0
            for t in self.timings:
                if t.instance_id == handle.instance_id:
                    t.blocked_seconds += blocked
            if decision == CONTINUE:
                still.append((handle, duration))
        self.running = still

    def run(self) -> list:
        world = self.world
        while world.clock < world.config.total_steps:
            self._check_conservation()
            self._spawn_due()
            self._check_conservation()
            hook = self._boundary_hook if self.running else None
            world.step(pre_commit=hook)
        # End anything whose duration reaches past the final boundary.
        if self.running:
            for handle, _duration in self.running:
                coupling.recv_report(handle, self.timeout)
                coupling.boundary_sync(world, handle, END, self.timeout)
            self.running = []
        self._check_conservation()
        return world.stats_history


def run_multilevel(world: CoarseWorld, schedule: list[SpawnSpec], base_dir: str,
                   *, in_process: bool = False,
                   timeout: float = coupling.DEFAULT_TIMEOUT) -> MultiLevelRunner:
    runner = MultiLevelRunner(world, schedule, base_dir,
                              in_process=in_process, timeout=timeout)
    runner.run()
    return runner

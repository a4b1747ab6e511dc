"""Coarse time-stepped agent-based kernel.

The world advances in lock-step timesteps across one or more logical
processes (workers), each owning a disjoint set of entities.  Within a step
each worker, for its own entities: delivers transmissions queued at the
previous boundary, advances mobility, draws message generation, and queues
the resulting broadcasts.  All cross-worker routing happens in exchange() at
the step barrier, in a deterministic merge order, so aggregate per-step
counters are identical for any worker count given the same seed.

Messages broadcast at step t are received at step t+1.  The receiver set is
computed at the exchange against positions at the start of the receiving
step; the sender position stamped on each transmission (its position at send
time) drives the forwarding distance gate.
"""

from __future__ import annotations

import bisect
import math
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .dissemination import DedupCache, Message, PbBConfig, ReceiveOutcome, generate, on_receive
from .geometry import ConfigError, WorldExtent, extent_for_entities, wrap
from .mobility import STATIC, MobilityKind, MobilityState, rwp_pick, advance
from .rng import GENERATION, GOSSIP, MOBILITY, substream
from .spatial import SpatialGrid


@dataclass
class ModelConfig:
    num_entities: int
    mobile_fraction: float = 0.5
    total_steps: int = 900
    pbb: PbBConfig = field(default_factory=PbBConfig)
    cache_capacity: int = 0
    num_workers: int = 1
    adaptive_partitioning: bool = False
    rebalance_period: int = 25
    seed: int = 1

    def validate(self) -> None:
        if self.num_entities < 1:
            raise ConfigError(f"num_entities must be >= 1, got {self.num_entities}")
        if self.total_steps < 1:
            raise ConfigError(f"total_steps must be >= 1, got {self.total_steps}")
        if self.num_workers < 1:
            raise ConfigError(f"num_workers must be >= 1, got {self.num_workers}")
        if not 0.0 <= self.mobile_fraction <= 1.0:
            raise ConfigError(f"mobile_fraction out of [0,1]: {self.mobile_fraction}")
        if self.rebalance_period < 1:
            raise ConfigError(f"rebalance_period must be >= 1, got {self.rebalance_period}")
        if self.cache_capacity < 0:
            raise ConfigError(f"cache_capacity must be >= 0, got {self.cache_capacity}")


@dataclass
class StepStats:
    step: int
    originated: int = 0
    delivered: int = 0
    forwarded: int = 0
    discarded_by_cache: int = 0
    interworker: int = 0
    per_worker_interworker: list[int] = field(default_factory=list)
    migrations: int = 0
    max_hop: int = 0  # highest hop_count among delivered copies this step

    @property
    def receptions(self) -> int:
        return self.delivered + self.discarded_by_cache


class Entity:
    """One simulated device: position, mobility, dedup cache, RNG streams."""

    __slots__ = (
        "eid", "x", "y", "mobility", "cache", "owner", "active",
        "inbox", "pending", "emit_seq", "origin_seq", "window_counts",
        "rng_mobility", "rng_generation", "rng_gossip",
    )

    def __init__(self, eid: int, x: float, y: float, mobility: MobilityState,
                 cache_capacity: int, seed: int):
        self.eid = eid
        self.x = x
        self.y = y
        self.mobility = mobility
        self.cache = DedupCache(cache_capacity)
        self.owner = 0
        self.active = True
        self.inbox: list[tuple[Message, float]] = []
        self.pending: list[Message] = []
        self.emit_seq = 0
        self.origin_seq = 0
        self.window_counts: Counter[int] = Counter()
        self.rng_mobility = substream(seed, eid, MOBILITY)
        self.rng_generation = substream(seed, eid, GENERATION)
        self.rng_gossip = substream(seed, eid, GOSSIP)


@dataclass
class LogicalProcess:
    index: int
    entity_ids: list[int] = field(default_factory=list)
    outbox: list = field(default_factory=list)
    steps_done: int = 0


def partition_static(xs, extent: WorldExtent, num_workers: int) -> list[int]:
    """Assign entities to workers by vertical stripes of equal width."""
    if num_workers < 1:
        raise ConfigError(f"num_workers must be >= 1, got {num_workers}")
    stripe = extent.width / num_workers
    last = num_workers - 1
    return [min(int(x / stripe), last) for x in xs]


def decide_migration(window_counts: Counter, own: int, margin: float = 0.6) -> int | None:
    """Destination worker for an entity, or None to stay.

    Migrates only when a single other worker holds strictly more than
    `margin` of the entity's receptions in the window (ties between workers
    break toward the lowest index).
    """
    if not window_counts:
        return None
    best_worker, best_count = max(sorted(window_counts.items()), key=lambda kv: kv[1])
    if best_worker == own:
        return None
    if best_count <= margin * sum(window_counts.values()):
        return None
    return best_worker


class CoarseWorld:
    """Partitioned Level 0 state advanced in lock-step timesteps."""

    def __init__(self, config: ModelConfig):
        config.validate()
        self.config = config
        self.extent = extent_for_entities(config.num_entities)
        n = config.num_entities
        init_rng = substream(config.seed, -1, "init")
        num_mobile = int(math.floor(config.mobile_fraction * n))
        self.entities: list[Entity] = []
        for eid in range(n):
            x = init_rng.uniform(0.0, self.extent.width)
            y = init_rng.uniform(0.0, self.extent.height)
            e = Entity(eid, x, y, STATIC, config.cache_capacity, config.seed)
            if eid < num_mobile:
                e.mobility = rwp_pick(e.rng_mobility, self.extent)
            self.entities.append(e)
        self.xs = np.array([e.x for e in self.entities])
        self.ys = np.array([e.y for e in self.entities])
        self.clock = 0
        self.stats_history: list[StepStats] = []
        self._in_step = False
        self.lps = [LogicalProcess(i) for i in range(config.num_workers)]
        for eid, owner in enumerate(partition_static(self.xs, self.extent, config.num_workers)):
            self.entities[eid].owner = owner
            self.lps[owner].entity_ids.append(eid)
        self._pool = (
            ThreadPoolExecutor(max_workers=config.num_workers, thread_name_prefix="lp")
            if config.num_workers > 1 else None
        )

    # -- lifecycle ---------------------------------------------------------

    def close(self) -> None:
        if self._pool is not None:
            self._pool.shutdown(wait=True)
            self._pool = None

    def __enter__(self) -> "CoarseWorld":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    # -- introspection -----------------------------------------------------

    @property
    def num_mobile(self) -> int:
        return sum(1 for e in self.entities
                   if e.mobility.kind is MobilityKind.RANDOM_WAYPOINT)

    @property
    def active_count(self) -> int:
        return sum(1 for e in self.entities if e.active)

    def positions(self) -> dict[int, tuple[float, float]]:
        return {e.eid: (e.x, e.y) for e in self.entities}

    def at_boundary(self) -> bool:
        return not self._in_step

    # -- stepping ----------------------------------------------------------

    def step(self, pre_commit=None) -> StepStats:
        """Advance the world by one timestep.

        `pre_commit`, when given, runs after all workers finish their phases
        but before the boundary is committed (exchange + clock increment);
        the multi-level runner uses it to wait for fine-instance reports.
        """
        if self.clock >= self.config.total_steps:
            raise ConfigError(f"clock {self.clock} already at total_steps")
        for lp in self.lps:
            if lp.steps_done != self.clock:
                raise RuntimeError(
                    f"lock-step violation: worker {lp.index} at step "
                    f"{lp.steps_done}, world clock {self.clock}")
        self._in_step = True
        stats = StepStats(step=self.clock,
                          per_worker_interworker=[0] * self.config.num_workers)
        if self._pool is None:
            results = [self._worker_phases(lp) for lp in self.lps]
        else:
            futures = [self._pool.submit(self._worker_phases, lp) for lp in self.lps]
            results = [f.result() for f in futures]
        for orig, deliv, fwd, disc, max_hop in results:
            stats.originated += orig
            stats.delivered += deliv
            stats.forwarded += fwd
            stats.discarded_by_cache += disc
            if max_hop > stats.max_hop:
                stats.max_hop = max_hop
        if pre_commit is not None:
            pre_commit(self)
        self.exchange(stats)
        if (self.config.adaptive_partitioning
                and (self.clock + 1) % self.config.rebalance_period == 0):
            stats.migrations = self.rebalance()
        for lp in self.lps:
            lp.steps_done += 1
        self.clock += 1
        self._in_step = False
        self.stats_history.append(stats)
        return stats

    def run(self, steps: int | None = None) -> list[StepStats]:
        remaining = self.config.total_steps - self.clock
        if steps is not None:
            remaining = min(steps, remaining)
        return [self.step() for _ in range(remaining)]

    def _worker_phases(self, lp: LogicalProcess):
        """Phases 1-4 for one worker's entities; no cross-worker access."""
        cfg = self.config.pbb
        extent = self.extent
        clock = self.clock
        orig = deliv = fwd = disc = max_hop = 0
        xs, ys = self.xs, self.ys
        for eid in lp.entity_ids:
            e = self.entities[eid]
            if not e.active:
                continue
            inbox = e.inbox
            if inbox:
                cache = e.cache
                gossip = e.rng_gossip
                pending = e.pending
                for msg, dist in inbox:
                    outcome = on_receive(cache, msg, dist, gossip, cfg)
                    if outcome is ReceiveOutcome.DISCARDED:
                        disc += 1
                    else:
                        deliv += 1
                        if msg.hop_count > max_hop:
                            max_hop = msg.hop_count
                        if outcome is ReceiveOutcome.DELIVERED_AND_FORWARD:
                            fwd += 1
                            pending.append(msg.forward_copy())
                inbox.clear()
            if e.mobility.kind is MobilityKind.RANDOM_WAYPOINT:
                e.x, e.y, e.mobility = advance(e.x, e.y, e.mobility,
                                               e.rng_mobility, extent)
                xs[eid] = e.x
                ys[eid] = e.y
            msg = generate(eid, clock, e.origin_seq, e.rng_generation, cfg)
            if msg is not None:
                e.origin_seq += 1
                orig += 1
                e.cache.insert(msg.mid)
                e.pending.append(msg)
            if e.pending:
                for msg in e.pending:
                    lp.outbox.append((eid, e.emit_seq, msg, e.x, e.y))
                    e.emit_seq += 1
                e.pending.clear()
        return orig, deliv, fwd, disc, max_hop

    def exchange(self, stats: StepStats) -> None:
        """Flush worker outboxes and route deliveries for the next step.

        Transmissions are merged in (sender id, message id, emission seq)
        order regardless of which worker produced them, so inbox contents and
        ordering never depend on the partitioning.
        """
        all_tx = []
        for lp in self.lps:
            all_tx.extend(lp.outbox)
            lp.outbox = []
        if not all_tx:
            return
        all_tx.sort(key=lambda t: (t[0], t[2].mid, t[1]))
        cfg = self.config.pbb
        grid = SpatialGrid(self.xs, self.ys, self.extent, cfg.interaction_range)
        entities = self.entities
        adaptive = self.config.adaptive_partitioning
        per_worker = stats.per_worker_interworker
        inter = 0
        for sender_id, _emit, msg, sx, sy in all_tx:
            ids, dists = grid.query(sx, sy, cfg.interaction_range, exclude=sender_id)
            if not ids:
                continue
            sender_owner = entities[sender_id].owner
            for rid, dist in zip(ids, dists):
                recv = entities[rid]
                recv.inbox.append((msg, dist))
                if recv.owner != sender_owner:
                    inter += 1
                    per_worker[recv.owner] += 1
                if adaptive:
                    recv.window_counts[sender_owner] += 1
        stats.interworker = inter

    def rebalance(self) -> int:
        """Migrate entities toward the worker owning most of their recent
        interaction partners; returns the number of migrations."""
        moves = []
        for e in self.entities:
            dest = decide_migration(e.window_counts, e.owner)
            e.window_counts.clear()
            if dest is not None and e.active:
                moves.append((e, dest))
        for e, dest in moves:
            self.lps[e.owner].entity_ids.remove(e.eid)
            bisect.insort(self.lps[dest].entity_ids, e.eid)
            e.owner = dest
        return len(moves)

    # -- handoff support (used by the coupling layer) -----------------------

    def deactivate(self, entity_ids: list[int]) -> None:
        for eid in entity_ids:
            e = self.entities[eid]
            if not e.active:
                raise ConfigError(f"entity {eid} is already handed off")
            e.active = False

    def reactivate(self, entity_id: int, x: float, y: float) -> None:
        e = self.entities[entity_id]
        if e.active:
            raise ConfigError(f"entity {entity_id} is not handed off")
        e.active = True
        e.x, e.y = wrap(x, y, self.extent)
        self.xs[entity_id] = e.x
        self.ys[entity_id] = e.y


def build_world(config: ModelConfig) -> CoarseWorld:
    """World from the density rule: square torus, uniform initial positions,
    the first floor(mobile_fraction * n) entities mobile, fully seeded."""
    return CoarseWorld(config)


def totals(history: list[StepStats]) -> dict[str, int]:
    return {
        "originated": sum(s.originated for s in history),
        "delivered": sum(s.delivered for s in history),
        "forwarded": sum(s.forwarded for s in history),
        "discarded_by_cache": sum(s.discarded_by_cache for s in history),
        "interworker": sum(s.interworker for s in history),
        "migrations": sum(s.migrations for s in history),
        "max_hop": max((s.max_hop for s in history), default=0),
    }

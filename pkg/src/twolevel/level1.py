"""Fine-grained event-driven wireless simulator.

Models a market: a grid of static seller nodes plus pedestrian nodes looking
for a specific seller.  Nodes form an ad-hoc network under a unit-disk radio
model and route with a reactive request/reply protocol (flooded route
requests with per-(origin, sequence) dedup, replies unicast back along the
accumulated path).  A pedestrian queries its target seller for its position,
then walks toward it.

Time is event-driven on an integer tick clock (1 tick = fine_resolution
timeunits); the coarse step length must be an integer multiple of the
resolution.  One instance runs exactly one coarse step per report cycle and
never executes an event beyond the requested boundary.

Deliberately stdlib-only: instances run as short-lived subprocesses and
should not pay for heavyweight imports.
"""

from __future__ import annotations

import heapq
import math
import os
from dataclasses import dataclass, field

from .geometry import ConfigError

# Event kinds, in tie-break priority order at equal timestamps.
PACKET_ARRIVAL = 0
MOVEMENT_TICK = 1
APP_TIMER = 2

ROUTE_REQUEST = "rreq"
ROUTE_REPLY = "rrep"
APP_QUERY = "query"
APP_REPLY = "reply"

DEFAULT_HOP_LIMIT = 64
DEFAULT_MAX_RETRIES = 5
DEFAULT_RETRY_TICKS = 50  # first retry delay; doubles per attempt
DEFAULT_ARRIVAL_RADIUS = 1.0

SCENARIO_FILENAME = "scenario.txt"


class ScenarioParseError(ConfigError):
    """Malformed scenario file; message names the line and field."""


def ticks_per_step(coarse_step_length: float, fine_resolution: float) -> int:
    """Number of fine ticks per coarse step; rejects non-multiples."""
    if coarse_step_length <= 0 or fine_resolution <= 0:
        raise ConfigError("timestep sizes must be positive")
    ratio = coarse_step_length / fine_resolution
    ticks = round(ratio)
    if ticks < 1 or abs(ratio - ticks) > 1e-9 * max(1.0, ratio):
        raise ConfigError(
            f"coarse step {coarse_step_length} is not a multiple of fine resolution {fine_resolution}")
    return ticks


@dataclass
class FineScenario:
    grid_rows: int
    grid_cols: int
    spacing: float
    radio_range: float
    walk_speed: float
    coarse_step_length: float
    fine_resolution: float
    sellers: list[tuple[int, float, float]] = field(default_factory=list)
    # (entity id, start x, start y, target seller id)
    pedestrians: list[tuple[int, float, float, int]] = field(default_factory=list)

    def validate(self) -> None:
        if self.grid_rows < 1 or self.grid_cols < 1:
            raise ConfigError(f"grid must be at least 1x1, got {self.grid_rows}x{self.grid_cols}")
        if self.radio_range <= 0 or self.walk_speed < 0 or self.spacing <= 0:
            raise ConfigError("spacing and radio_range must be > 0, walk_speed >= 0")
        ticks_per_step(self.coarse_step_length, self.fine_resolution)
        if len(self.sellers) != self.grid_rows * self.grid_cols:
            raise ConfigError(
                f"expected {self.grid_rows * self.grid_cols} sellers for a "
                f"{self.grid_rows}x{self.grid_cols} grid, got {len(self.sellers)}")
        seller_ids = [s[0] for s in self.sellers]
        if len(set(seller_ids)) != len(seller_ids):
            raise ConfigError("duplicate seller id")
        ped_ids = [p[0] for p in self.pedestrians]
        if len(set(ped_ids)) != len(ped_ids):
            raise ConfigError("duplicate pedestrian id")
        if set(seller_ids) & set(ped_ids):
            raise ConfigError("seller and pedestrian ids overlap")
        known = set(seller_ids)
        for pid, _, _, target in self.pedestrians:
            if target not in known:
                raise ConfigError(f"pedestrian {pid} targets unknown seller {target}")


def load_scenario(directory: str) -> FineScenario:
    """Parse and validate the scenario file inside `directory`.

    Format (one record per line, '#' comments allowed):
        GRID rows cols spacing radio_range walk_speed coarse_step fine_res
        SELLER id x y
        PED id x y target_seller_id
    """
    path = os.path.join(directory, SCENARIO_FILENAME)
    if not os.path.exists(path):
        raise ScenarioParseError(f"{path}: scenario file not found")
    header = None
    sellers: list[tuple[int, float, float]] = []
    peds: list[tuple[int, float, float, int]] = []

    def fail(lineno, what):
        raise ScenarioParseError(f"{path}:{lineno}: {what}")

    with open(path, encoding="ascii") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            fields = line.split()
            tag = fields[0].upper()
            try:
                if tag == "GRID":
                    if header is not None:
                        fail(lineno, "duplicate GRID header")
                    if len(fields) != 8:
                        fail(lineno, f"GRID expects 7 fields, got {len(fields) - 1}")
                    header = (int(fields[1]), int(fields[2]), float(fields[3]),
                              float(fields[4]), float(fields[5]), float(fields[6]),
                              float(fields[7]))
                elif tag == "SELLER":
                    if len(fields) != 4:
                        fail(lineno, f"SELLER expects 3 fields, got {len(fields) - 1}")
                    sellers.append((int(fields[1]), float(fields[2]), float(fields[3])))
                elif tag == "PED":
                    if len(fields) != 5:
                        fail(lineno, f"PED expects 4 fields, got {len(fields) - 1}")
                    peds.append((int(fields[1]), float(fields[2]), float(fields[3]),
                                 int(fields[4])))
                else:
                    fail(lineno, f"unknown record type {fields[0]!r}")
            except ValueError as exc:
                fail(lineno, f"bad numeric field ({exc})")
    if header is None:
        raise ScenarioParseError(f"{path}: missing GRID header")
    scenario = FineScenario(*header, sellers=sellers, pedestrians=peds)
    try:
        scenario.validate()
    except ConfigError as exc:
        raise ScenarioParseError(f"{path}: {exc}") from exc
    return scenario


def save_scenario(scenario: FineScenario, directory: str) -> str:
    scenario.validate()
    path = os.path.join(directory, SCENARIO_FILENAME)
    with open(path, "w", encoding="ascii") as fh:
        fh.write("# market scenario\n")
        fh.write("GRID %d %d %r %r %r %r %r\n" % (
            scenario.grid_rows, scenario.grid_cols, scenario.spacing,
            scenario.radio_range, scenario.walk_speed,
            scenario.coarse_step_length, scenario.fine_resolution))
        for sid, x, y in scenario.sellers:
            fh.write("SELLER %d %r %r\n" % (sid, x, y))
        for pid, x, y, target in scenario.pedestrians:
            fh.write("PED %d %r %r %d\n" % (pid, x, y, target))
    return path


def grid_scenario(
    rows: int = 10,
    cols: int = 10,
    spacing: float = 10.0,
    radio_factor: float = 1.5,
    walk_speed: float | None = None,
    coarse_step_length: float = 1.0,
    fine_ticks: int = 100,
    seller_id_base: int = 1_000_000,
    pedestrians: list[tuple[int, float, float, int]] | None = None,
) -> FineScenario:
    """Market scenario with sellers at grid coordinates, row-major ids.

    Radio range defaults to 1.5x the grid spacing so the grid is connected;
    walk speed defaults to one grid cell per coarse step.  Seller ids start
    high so they can never collide with coarse entity ids used as pedestrian
    ids.
    """
    if walk_speed is None:
        walk_speed = spacing / coarse_step_length
    sellers = [
        (seller_id_base + r * cols + c, c * spacing, r * spacing)
        for r in range(rows)
        for c in range(cols)
    ]
    return FineScenario(
        grid_rows=rows,
        grid_cols=cols,
        spacing=spacing,
        radio_range=radio_factor * spacing,
        walk_speed=walk_speed,
        coarse_step_length=coarse_step_length,
        fine_resolution=coarse_step_length / fine_ticks,
        sellers=sellers,
        pedestrians=list(pedestrians or []),
    )


@dataclass(frozen=True)
class RoutePacket:
    kind: str
    origin: int
    destination: int
    seq: int
    hop_limit: int
    # Nodes traversed so far, origin first (route requests accumulate it;
    # replies carry the full path and walk it backwards via path_pos).
    path: tuple[int, ...] = ()
    path_pos: int = 0
    payload: tuple = ()


class FineNode:
    __slots__ = ("nid", "x", "y", "is_pedestrian", "target", "routes", "seen_rreq",
                 "rreq_seq", "target_pos", "reached", "replied", "query_pending",
                 "attempts")

    def __init__(self, nid: int, x: float, y: float,
                 is_pedestrian: bool = False, target: int | None = None):
        self.nid = nid
        self.x = x
        self.y = y
        self.is_pedestrian = is_pedestrian
        self.target = target
        self.routes: dict[int, tuple[int, int]] = {}  # dest -> (next hop, hops)
        self.seen_rreq: set[tuple[int, int]] = set()
        self.rreq_seq = 0
        self.target_pos: tuple[float, float] | None = None
        self.reached = False
        self.replied = False
        self.query_pending = False
        self.attempts = 0


@dataclass
class FineReport:
    steps_run: int
    fine_clock: float
    entities: list[dict]
    counters: dict[str, int]

    def to_payload(self) -> dict:
        return {
            "steps_run": self.steps_run,
            "fine_clock": self.fine_clock,
            "entities": self.entities,
            "counters": dict(self.counters),
        }


class FineSim:
    """One isolated fine-grained instance (strictly single-threaded)."""

    def __init__(self, scenario: FineScenario, seed: int = 0,
                 hop_limit: int = DEFAULT_HOP_LIMIT,
                 max_retries: int = DEFAULT_MAX_RETRIES,
                 retry_ticks: int = DEFAULT_RETRY_TICKS,
                 arrival_radius: float = DEFAULT_ARRIVAL_RADIUS):
        scenario.validate()
        self.scenario = scenario
        self.seed = seed
        self.hop_limit = hop_limit
        self.max_retries = max_retries
        self.retry_ticks = retry_ticks
        self.arrival_radius = arrival_radius
        self.ticks_per_step = ticks_per_step(
            scenario.coarse_step_length, scenario.fine_resolution)
        self.nodes: dict[int, FineNode] = {}
        for sid, x, y in scenario.sellers:
            self.nodes[sid] = FineNode(sid, x, y)
        for pid, x, y, target in scenario.pedestrians:
            self.nodes[pid] = FineNode(pid, x, y, is_pedestrian=True, target=target)
        self._heap: list = []
        self._seq = 0
        self._last_tick = 0
        self.steps_run = 0
        self.counters = {
            "packets_sent": 0,
            "packets_received": 0,
            "events_processed": 0,
            "queries_answered": 0,
            "queries_undelivered": 0,
        }
        for pid, _, _, _ in scenario.pedestrians:
            self._schedule(0, APP_TIMER, (pid,))

    # -- event machinery ----------------------------------------------------

    def _schedule(self, tick: int, kind: int, data: tuple) -> None:
        self._seq += 1
        heapq.heappush(self._heap, (tick, kind, self._seq, data))

    @property
    def fine_clock(self) -> float:
        return self.steps_run * self.scenario.coarse_step_length

    def run_until(self, boundary: float) -> FineReport:
        """Process every event up to and including `boundary` timeunits.

        The boundary must be exactly one coarse step ahead of the current
        fine clock; events scheduled beyond it stay queued for later cycles.
        """
        expected = (self.steps_run + 1) * self.scenario.coarse_step_length
        if abs(boundary - expected) > 1e-9 * max(1.0, expected):
            raise ConfigError(
                f"boundary {boundary} != fine clock + coarse step ({expected})")
        boundary_tick = (self.steps_run + 1) * self.ticks_per_step
        heap = self._heap
        while heap and heap[0][0] <= boundary_tick:
            tick, kind, _seq, data = heapq.heappop(heap)
            if tick < self._last_tick:
                raise RuntimeError(
                    f"event queue corruption: popped tick {tick} after {self._last_tick}")
            self._last_tick = tick
            self.counters["events_processed"] += 1
            if kind == PACKET_ARRIVAL:
                self._handle_packet(tick, data[0], data[1])
            elif kind == MOVEMENT_TICK:
                self._handle_movement(tick, data[0])
            else:
                self._handle_app_timer(tick, data[0])
        self.steps_run += 1
        return self.report()

    def report(self) -> FineReport:
        entities = [
            {"id": n.nid, "x": n.x, "y": n.y, "reached": n.reached}
            for n in self.nodes.values()
            if n.is_pedestrian
        ]
        return FineReport(self.steps_run, self.fine_clock, entities,
                          dict(self.counters))

    # -- radio layer ---------------------------------------------------------

    def neighbors(self, nid: int) -> list[int]:
        """Unit-disk neighborhood; every node (sellers and pedestrians) relays."""
        me = self.nodes[nid]
        r2 = self.scenario.radio_range ** 2
        out = []
        for other in self.nodes.values():
            if other.nid == nid:
                continue
            if (other.x - me.x) ** 2 + (other.y - me.y) ** 2 <= r2:
                out.append(other.nid)
        return out

    def _broadcast(self, tick: int, sender: int, packet: RoutePacket) -> None:
        self.counters["packets_sent"] += 1
        for nid in self.neighbors(sender):
            self._schedule(tick + 1, PACKET_ARRIVAL, (nid, packet))

    def _unicast(self, tick: int, sender: int, next_hop: int, packet: RoutePacket) -> None:
        self.counters["packets_sent"] += 1
        self._schedule(tick + 1, PACKET_ARRIVAL, (next_hop, packet))

    # -- routing -------------------------------------------------------------

    def route_discover(self, source: int, destination: int, tick: int | None = None) -> None:
        """Flood a route request for `destination` from `source`.

        A self-route needs no discovery: delivery is local.
        """
        if source == destination:
            return
        if tick is None:
            tick = self._last_tick
        node = self.nodes[source]
        node.rreq_seq += 1
        node.seen_rreq.add((source, node.rreq_seq))
        packet = RoutePacket(ROUTE_REQUEST, source, destination, node.rreq_seq,
                             self.hop_limit, path=(source,))
        self._broadcast(tick, source, packet)

    def _handle_packet(self, tick: int, nid: int, packet: RoutePacket) -> None:
        self.counters["packets_received"] += 1
        node = self.nodes[nid]
        if packet.kind == ROUTE_REQUEST:
            key = (packet.origin, packet.seq)
            if key in node.seen_rreq:
                return
            node.seen_rreq.add(key)
            # Reverse route toward the origin; first arrival is shortest
            # because per-hop latency is uniform.
            node.routes.setdefault(packet.origin, (packet.path[-1], len(packet.path)))
            if nid == packet.destination:
                full = packet.path + (nid,)
                reply = RoutePacket(ROUTE_REPLY, packet.origin, nid, packet.seq,
                                    self.hop_limit, path=full, path_pos=len(full) - 1)
                self._unicast(tick, nid, full[-2], reply)
            elif len(packet.path) < packet.hop_limit:
                self._broadcast(tick, nid, RoutePacket(
                    ROUTE_REQUEST, packet.origin, packet.destination, packet.seq,
                    packet.hop_limit, path=packet.path + (nid,)))
        elif packet.kind == ROUTE_REPLY:
            pos = packet.path_pos - 1
            if packet.path[pos] != nid:
                return  # stale reply after a topology change; drop
            # Install both directions along the replied path.
            node.routes.setdefault(packet.destination,
                                   (packet.path[pos + 1], len(packet.path) - 1 - pos))
            if pos > 0:
                node.routes.setdefault(packet.origin, (packet.path[pos - 1], pos))
                self._unicast(tick, nid, packet.path[pos - 1],
                              RoutePacket(ROUTE_REPLY, packet.origin,
                                          packet.destination, packet.seq,
                                          packet.hop_limit, path=packet.path,
                                          path_pos=pos))
            elif node.query_pending:
                self._send_query(tick, node)
        elif packet.kind == APP_QUERY:
            if nid == packet.destination:
                reply = RoutePacket(APP_REPLY, nid, packet.origin, packet.seq,
                                    self.hop_limit, payload=(node.x, node.y))
                self._forward_app(tick, node, reply)
            else:
                self._forward_app(tick, node, packet)
        elif packet.kind == APP_REPLY:
            if nid == packet.destination:
                if not node.replied:
                    node.replied = True
                    node.target_pos = (packet.payload[0], packet.payload[1])
                    self.counters["queries_answered"] += 1
                    self._schedule(tick + 1, MOVEMENT_TICK, (nid,))
            else:
                self._forward_app(tick, node, packet)

    def _forward_app(self, tick: int, node: FineNode, packet: RoutePacket) -> None:
        route = node.routes.get(packet.destination)
        if route is None:
            return  # no route (disconnected or stale); rely on app retries
        self._unicast(tick, node.nid, route[0], packet)

    # -- pedestrian application ----------------------------------------------

    def _send_query(self, tick: int, node: FineNode) -> None:
        node.query_pending = False
        query = RoutePacket(APP_QUERY, node.nid, node.target, node.rreq_seq,
                            self.hop_limit)
        self._forward_app(tick, node, query)

    def _handle_app_timer(self, tick: int, pid: int) -> None:
        node = self.nodes[pid]
        if node.replied or node.reached:
            return
        if node.attempts > self.max_retries:
            self.counters["queries_undelivered"] += 1
            return
        node.attempts += 1
        if node.target in node.routes:
            self._send_query(tick, node)
        else:
            node.query_pending = True
            self.route_discover(pid, node.target, tick)
        self._schedule(tick + self.retry_ticks * (2 ** (node.attempts - 1)),
                       APP_TIMER, (pid,))

    def _handle_movement(self, tick: int, pid: int) -> None:
        node = self.nodes[pid]
        if node.reached or node.target_pos is None:
            return
        tx, ty = node.target_pos
        dx = tx - node.x
        dy = ty - node.y
        dist = math.hypot(dx, dy)
        step = self.scenario.walk_speed * self.scenario.fine_resolution
        if dist <= step:
            node.x, node.y = tx, ty
        else:
            node.x += dx / dist * step
            node.y += dy / dist * step
        if math.hypot(tx - node.x, ty - node.y) <= self.arrival_radius:
            node.reached = True
        else:
            self._schedule(tick + 1, MOVEMENT_TICK, (pid,))

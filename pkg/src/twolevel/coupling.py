"""Level 0 <-> Level 1 interoperability: spawning, wire protocol, handoff.

Level 0 plays the server role: before starting an instance it binds a fresh
listening TCP port, writes the scenario into a fresh per-instance directory,
and launches the fine simulator with (directory, port) as its startup
parameters.  The instance connects, says Hello, then runs one coarse step at
a time: after each step it sends a StateReport and blocks until Level 0
answers Continue or End.  End is acknowledged with a FinalState, after which
the entities are reabsorbed into the coarse world.

Wire format: newline-delimited JSON, one envelope per line, keys sorted,
fields `kind`, `instance`, `step`, `payload`.  The byte encoding is normative
(golden files under tests/data pin it).
"""

from __future__ import annotations

import json
import os
import socket
import subprocess
import sys
import threading
import time
from dataclasses import dataclass, field
from enum import Enum

from .geometry import ConfigError, wrap
from .level1 import FineScenario, FineSim, load_scenario, save_scenario, ticks_per_step

HELLO = "Hello"
STATE_REPORT = "StateReport"
CONTINUE = "Continue"
END = "End"
FINAL_STATE = "FinalState"
ENVELOPE_KINDS = (HELLO, STATE_REPORT, CONTINUE, END, FINAL_STATE)

META_FILENAME = "meta.json"
DEFAULT_TIMEOUT = 30.0


class CouplingError(RuntimeError):
    """Protocol violation, lost connection, or spawn failure."""


@dataclass(frozen=True)
class Envelope:
    kind: str
    instance: int
    step: int
    payload: dict = field(default_factory=dict)


def encode_envelope(env: Envelope) -> bytes:
    if env.kind not in ENVELOPE_KINDS:
        raise CouplingError(f"unknown envelope kind {env.kind!r}")
    record = {"kind": env.kind, "instance": env.instance, "step": env.step,
              "payload": env.payload}
    return json.dumps(record, sort_keys=True, separators=(",", ":")).encode("utf-8") + b"\n"


def decode_envelope(line: bytes | str) -> Envelope:
    if isinstance(line, bytes):
        line = line.decode("utf-8")
    try:
        record = json.loads(line)
    except json.JSONDecodeError as exc:
        raise CouplingError(f"bad envelope line: {exc}") from exc
    try:
        kind = record["kind"]
        env = Envelope(kind, int(record["instance"]), int(record["step"]),
                       record["payload"])
    except (KeyError, TypeError) as exc:
        raise CouplingError(f"envelope missing field: {exc}") from exc
    if kind not in ENVELOPE_KINDS:
        raise CouplingError(f"unknown envelope kind {kind!r}")
    return env


def align(coarse_step_length: float, fine_resolution: float) -> tuple[float, float]:
    """Validate the timestep-multiple constraint before any spawn."""
    ticks_per_step(coarse_step_length, fine_resolution)
    return coarse_step_length, fine_resolution


class InstanceStatus(Enum):
    STARTING = "starting"
    RUNNING = "running"
    ENDED = "ended"


@dataclass
class InstanceHandle:
    instance_id: int
    port: int
    directory: str
    entity_ids: list[int]
    coarse_step_length: float
    offset: tuple[float, float]
    status: InstanceStatus = InstanceStatus.STARTING
    reports_received: int = 0
    start_step: int = 0
    conn: socket.socket | None = None
    _rfile = None
    proc: subprocess.Popen | None = None
    thread: threading.Thread | None = None

    @property
    def fine_clock_high_water(self) -> float:
        return self.reports_received * self.coarse_step_length

    def send(self, env: Envelope) -> None:
        try:
            self.conn.sendall(encode_envelope(env))
        except OSError as exc:
            raise CouplingError(
                f"instance {self.instance_id}: connection lost while sending ({exc})") from exc

    def recv(self, timeout: float = DEFAULT_TIMEOUT) -> Envelope:
        self.conn.settimeout(timeout)
        try:
            line = self._rfile.readline()
        except OSError as exc:
            raise CouplingError(
                f"instance {self.instance_id}: connection lost ({exc})") from exc
        if not line:
            raise CouplingError(
                f"instance {self.instance_id}: connection closed by Level 1")
        env = decode_envelope(line)
        if env.instance != self.instance_id:
            raise CouplingError(
                f"instance {self.instance_id}: envelope for instance {env.instance}")
        return env

    def close(self) -> None:
        if self._rfile is not None:
            self._rfile.close()
            self._rfile = None
        if self.conn is not None:
            self.conn.close()
            self.conn = None
        if self.proc is not None:
            self.proc.wait(timeout=DEFAULT_TIMEOUT)
            self.proc = None
        if self.thread is not None:
            self.thread.join(timeout=DEFAULT_TIMEOUT)
            self.thread = None

    def kill(self) -> None:
        if self.proc is not None:
            self.proc.kill()
            self.proc.wait()
            self.proc = None
        if self._rfile is not None:
            self._rfile.close()
            self._rfile = None
        if self.conn is not None:
            self.conn.close()
            self.conn = None


def _client_env() -> dict:
    """Subprocess environment that can import this package uninstalled."""
    env = dict(os.environ)
    pkg_root = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
    existing = env.get("PYTHONPATH")
    env["PYTHONPATH"] = pkg_root + (os.pathsep + existing if existing else "")
    return env


def begin_spawn(
    world,
    entity_ids: list[int],
    scenario: FineScenario,
    base_dir: str,
    instance_id: int,
    *,
    in_process: bool = False,
    launch_cmd: list[str] | None = None,
) -> InstanceHandle:
    """Write the instance directory, bind the port, launch the client.

    Does not wait for the Hello; complete_spawn() does.  Splitting the two
    lets several instances boot concurrently at one boundary.
    """
    if not world.at_boundary():
        raise ConfigError("spawn is only legal at a coarse step boundary")
    for eid in entity_ids:
        if not world.entities[eid].active:
            raise ConfigError(f"entity {eid} is already handed off")
    ped_ids = [p[0] for p in scenario.pedestrians]
    if sorted(ped_ids) != sorted(entity_ids):
        raise ConfigError(
            f"scenario pedestrians {sorted(ped_ids)} != handed-off entities {sorted(entity_ids)}")

    directory = os.path.join(base_dir, f"instance-{instance_id:03d}")
    os.makedirs(directory)  # must be fresh: one directory per instance
    save_scenario(scenario, directory)
    seed = (world.config.seed * 1_000_003 + instance_id) & 0x7FFFFFFF
    meta = {"instance": instance_id, "seed": seed, "start_step": world.clock}
    with open(os.path.join(directory, META_FILENAME), "w", encoding="ascii") as fh:
        json.dump(meta, fh)

    listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    listener.bind(("127.0.0.1", 0))
    listener.listen(1)
    port = listener.getsockname()[1]

    first_eid = entity_ids[0]
    first_ped = next(p for p in scenario.pedestrians if p[0] == first_eid)
    entity = world.entities[first_eid]
    offset = (entity.x - first_ped[1], entity.y - first_ped[2])

    handle = InstanceHandle(instance_id, port, directory, list(entity_ids),
                            scenario.coarse_step_length, offset,
                            start_step=world.clock)
    handle._listener = listener
    if in_process:
        handle.thread = threading.Thread(
            target=run_fine_client, args=(directory, port), daemon=True)
        handle.thread.start()
    else:
        prefix = list(launch_cmd) if launch_cmd is not None else [
            sys.executable, "-m", "twolevel.cli", "run-l1"]
        # Startup parameter order is part of the contract: directory, then port.
        handle.proc = subprocess.Popen(prefix + [directory, str(port)],
                                       env=_client_env())
    return handle


def complete_spawn(world, handle: InstanceHandle, timeout: float = DEFAULT_TIMEOUT) -> InstanceHandle:
    """Wait for the Hello and hand the entities off; undoes the spawn on failure."""
    listener = handle._listener
    listener.settimeout(timeout)
    try:
        conn, _addr = listener.accept()
        handle.conn = conn
        handle._rfile = conn.makefile("rb")
        hello = handle.recv(timeout)
    except (socket.timeout, CouplingError) as exc:
        handle.kill()
        listener.close()
        raise CouplingError(
            f"instance {handle.instance_id}: Level 1 did not connect ({exc})") from exc
    finally:
        handle._listener = None
        listener.close()
    if hello.kind != HELLO:
        handle.kill()
        raise CouplingError(
            f"instance {handle.instance_id}: expected Hello, got {hello.kind}")
    world.deactivate(handle.entity_ids)
    handle.status = InstanceStatus.RUNNING
    return handle


def spawn(
    world,
    entity_ids: list[int],
    scenario: FineScenario,
    base_dir: str,
    instance_id: int,
    *,
    in_process: bool = False,
    timeout: float = DEFAULT_TIMEOUT,
    launch_cmd: list[str] | None = None,
) -> InstanceHandle:
    """Start one isolated fine instance and hand the entities to it."""
    handle = begin_spawn(world, entity_ids, scenario, base_dir, instance_id,
                         in_process=in_process, launch_cmd=launch_cmd)
    return complete_spawn(world, handle, timeout)


def recv_report(handle: InstanceHandle, timeout: float = DEFAULT_TIMEOUT) -> Envelope:
    """Blocking wait for the StateReport that closes the instance's step."""
    env = handle.recv(timeout)
    if env.kind != STATE_REPORT:
        raise CouplingError(
            f"instance {handle.instance_id}: expected StateReport, got {env.kind}")
    handle.reports_received += 1
    return env


def boundary_sync(world, handle: InstanceHandle, decision: str,
                  timeout: float = DEFAULT_TIMEOUT) -> Envelope | None:
    """Answer the pending StateReport with Continue or End.

    On End the FinalState is read, the connection is shut down, and the
    entities are reabsorbed at their reported positions (fine-local frame
    mapped back to the torus through the offset recorded at spawn time).
    """
    if decision not in (CONTINUE, END):
        raise CouplingError(f"decision must be Continue or End, not {decision!r}")
    step = handle.start_step + handle.reports_received - 1
    handle.send(Envelope(decision, handle.instance_id, step))
    if decision == CONTINUE:
        return None
    final = handle.recv(timeout)
    if final.kind != FINAL_STATE:
        raise CouplingError(
            f"instance {handle.instance_id}: expected FinalState, got {final.kind}")
    ox, oy = handle.offset
    reported = {int(rec["id"]): rec for rec in final.payload.get("entities", [])}
    for eid in handle.entity_ids:
        if eid not in reported:
            raise CouplingError(
                f"instance {handle.instance_id}: FinalState missing entity {eid}")
        rec = reported[eid]
        world.reactivate(eid, rec["x"] + ox, rec["y"] + oy)
    handle.status = InstanceStatus.ENDED
    handle.close()
    return final


def run_fine_client(scenario_dir: str, port: int, host: str = "127.0.0.1") -> None:
    """Level 1 side of the protocol; runs until Level 0 sends End."""
    meta_path = os.path.join(scenario_dir, META_FILENAME)
    meta = {}
    if os.path.exists(meta_path):
        with open(meta_path, encoding="ascii") as fh:
            meta = json.load(fh)
    instance = int(meta.get("instance", 0))
    seed = int(meta.get("seed", 0))
    start_step = int(meta.get("start_step", 0))
    scenario = load_scenario(scenario_dir)
    sim = FineSim(scenario, seed=seed)

    with socket.create_connection((host, port)) as conn:
        rfile = conn.makefile("rb")
        conn.sendall(encode_envelope(Envelope(HELLO, instance, start_step)))
        step = start_step
        while True:
            report = sim.run_until(sim.fine_clock + scenario.coarse_step_length)
            conn.sendall(encode_envelope(
                Envelope(STATE_REPORT, instance, step, report.to_payload())))
            line = rfile.readline()
            if not line:
                raise CouplingError(f"instance {instance}: Level 0 closed the connection")
            env = decode_envelope(line)
            if env.kind == CONTINUE:
                step += 1
                continue
            if env.kind == END:
                conn.sendall(encode_envelope(
                    Envelope(FINAL_STATE, instance, step, report.to_payload())))
                rfile.close()
                return
            raise CouplingError(f"instance {instance}: unexpected decision {env.kind}")

import os
import random
import sys
import threading
import time

import pytest

from twolevel.coupling import (
    CONTINUE,
    END,
    ENVELOPE_KINDS,
    CouplingError,
    Envelope,
    InstanceStatus,
    align,
    begin_spawn,
    boundary_sync,
    complete_spawn,
    decode_envelope,
    encode_envelope,
    recv_report,
    spawn,
)
from twolevel.dissemination import PbBConfig
from twolevel.geometry import ConfigError, wrap
from twolevel.level0 import ModelConfig, build_world
from twolevel.level1 import grid_scenario

GOLDEN = os.path.join(os.path.dirname(__file__), "data", "envelopes.golden")

GOLDEN_ENVELOPES = [
    Envelope("Hello", 3, 0),
    Envelope("StateReport", 3, 7, {
        "counters": {"packets_received": 12, "packets_sent": 9},
        "entities": [{"id": 41, "reached": False, "x": 2.5, "y": -0.75}],
        "fine_clock": 8.0, "steps_run": 8}),
    Envelope("Continue", 3, 7),
    Envelope("End", 3, 9),
    Envelope("FinalState", 3, 9, {
        "counters": {"events": 210},
        "entities": [{"id": 41, "reached": True, "x": 90.0, "y": 90.0}],
        "fine_clock": 10.0, "steps_run": 10}),
]


def random_payload(rng, depth=0):
    out = {}
    for i in range(rng.randint(0, 4)):
        key = f"k{i}"
        pick = rng.random()
        if pick < 0.3:
            out[key] = rng.randint(-1000, 1000)
        elif pick < 0.6:
            out[key] = round(rng.uniform(-1e4, 1e4), 6)
        elif pick < 0.8:
            out[key] = rng.choice([True, False, None, "text", ""])
        elif depth < 2:
            out[key] = [rng.randint(0, 9) for _ in range(rng.randint(0, 3))]
    return out


def handoff_scenario(entity_ids, rows=2, cols=2):
    sc = grid_scenario(rows=rows, cols=cols)
    target = sc.sellers[-1][0]
    for i, eid in enumerate(entity_ids):
        sc.pedestrians.append((eid, -5.0, 5.0 * i, target))
    return sc


def tiny_world(n=12, steps=30, seed=11, workers=1):
    return build_world(ModelConfig(
        num_entities=n, total_steps=steps, seed=seed, num_workers=workers,
        pbb=PbBConfig(generation_probability=0.0)))


# -- wire format ---------------------------------------------------------------

def test_envelope_roundtrip_randomized():
    rng = random.Random(99)
    for _ in range(200):
        env = Envelope(rng.choice(ENVELOPE_KINDS), rng.randint(0, 999),
                       rng.randint(0, 10_000), random_payload(rng))
        assert decode_envelope(encode_envelope(env)) == env


def test_encoding_matches_golden_bytes():
    with open(GOLDEN, "rb") as fh:
        golden_lines = fh.read().splitlines(keepends=True)
    assert len(golden_lines) == len(GOLDEN_ENVELOPES)
    for env, line in zip(GOLDEN_ENVELOPES, golden_lines):
        assert encode_envelope(env) == line
        assert decode_envelope(line) == env


def test_decode_rejects_garbage():
    with pytest.raises(CouplingError):
        decode_envelope(b"not json\n")
    with pytest.raises(CouplingError):
        decode_envelope(b'{"kind":"Nope","instance":1,"step":0,"payload":{}}\n')
    with pytest.raises(CouplingError):
        decode_envelope(b'{"kind":"Hello","step":0,"payload":{}}\n')
    with pytest.raises(CouplingError):
        encode_envelope(Envelope("Bogus", 0, 0))


# -- timestep alignment ----------------------------------------------------------

def test_align_accepts_multiples():
    assert align(1.0, 0.01) == (1.0, 0.01)
    assert align(1.0, 1.0) == (1.0, 1.0)


def test_align_rejects_non_multiple():
    with pytest.raises(ConfigError):
        align(1.0, 0.3)


# -- spawn / handoff lifecycle ---------------------------------------------------

@pytest.mark.parametrize("in_process", [True, False])
def test_spawn_and_end_restores_entity(tmp_path, in_process):
    with tiny_world() as world:
        eid = 0
        handle = spawn(world, [eid], handoff_scenario([eid]), str(tmp_path), 0,
                       in_process=in_process)
        assert handle.status is InstanceStatus.RUNNING
        assert world.active_count == world.config.num_entities - 1
        assert not world.entities[eid].active

        world.step(pre_commit=lambda w: (
            recv_report(handle), boundary_sync(w, handle, END)))
        assert handle.status is InstanceStatus.ENDED
        assert world.active_count == world.config.num_entities
        assert handle.fine_clock_high_water == pytest.approx(1.0)


def test_reabsorbed_position_uses_affine_offset(tmp_path):
    with tiny_world() as world:
        eid = 3
        entity = world.entities[eid]
        start = (entity.x, entity.y)
        scenario = handoff_scenario([eid])
        handle = spawn(world, [eid], scenario, str(tmp_path), 0, in_process=True)
        # offset maps the pedestrian's local start onto the coarse position
        ped = scenario.pedestrians[0]
        assert (ped[1] + handle.offset[0], ped[2] + handle.offset[1]) == \
            pytest.approx(start)
        final = None

        def hook(w):
            nonlocal final
            recv_report(handle)
            final = boundary_sync(w, handle, END)

        world.step(pre_commit=hook)
        rec = next(r for r in final.payload["entities"] if r["id"] == eid)
        expected = wrap(rec["x"] + handle.offset[0], rec["y"] + handle.offset[1],
                        world.extent)
        assert (world.entities[eid].x, world.entities[eid].y) == pytest.approx(expected)


def test_continue_three_times_then_end(tmp_path):
    with tiny_world() as world:
        handle = spawn(world, [1], handoff_scenario([1]), str(tmp_path), 0,
                       in_process=True)

        decisions = iter([CONTINUE, CONTINUE, CONTINUE, END])

        for _ in range(4):
            world.step(pre_commit=lambda w: (
                recv_report(handle), boundary_sync(w, handle, next(decisions))))
        assert handle.status is InstanceStatus.ENDED
        assert handle.fine_clock_high_water == pytest.approx(4.0)


def test_concurrent_spawns_get_distinct_ports_and_directories(tmp_path):
    with tiny_world() as world:
        h1 = begin_spawn(world, [0], handoff_scenario([0]), str(tmp_path), 0,
                         in_process=True)
        h2 = begin_spawn(world, [1], handoff_scenario([1]), str(tmp_path), 1,
                         in_process=True)
        assert h1.port != h2.port
        assert h1.directory != h2.directory
        complete_spawn(world, h1)
        complete_spawn(world, h2)
        assert world.active_count == world.config.num_entities - 2

        def hook(w):
            for h in (h1, h2):
                recv_report(h)
                boundary_sync(w, h, END)

        world.step(pre_commit=hook)
        assert world.active_count == world.config.num_entities


def test_spawn_rejected_off_boundary(tmp_path):
    with tiny_world() as world:
        def hook(w):
            spawn(w, [0], handoff_scenario([0]), str(tmp_path), 0, in_process=True)

        with pytest.raises(ConfigError, match="boundary"):
            world.step(pre_commit=hook)


def test_spawn_rejects_mismatched_pedestrians(tmp_path):
    with tiny_world() as world:
        with pytest.raises(ConfigError, match="pedestrians"):
            spawn(world, [0, 1], handoff_scenario([0]), str(tmp_path), 0,
                  in_process=True)


def test_spawn_timeout_restores_entities(tmp_path):
    with tiny_world() as world:
        sleeper = [sys.executable, "-c", "import time; time.sleep(5)"]
        t0 = time.perf_counter()
        with pytest.raises(CouplingError, match="did not connect"):
            spawn(world, [0], handoff_scenario([0]), str(tmp_path), 0,
                  timeout=0.4, launch_cmd=sleeper)
        assert time.perf_counter() - t0 < 3.0
        assert world.active_count == world.config.num_entities
        assert world.entities[0].active


def test_connection_loss_is_loud(tmp_path):
    with tiny_world() as world:
        handle = spawn(world, [0], handoff_scenario([0]), str(tmp_path), 0,
                       in_process=False)
        handle.proc.kill()
        handle.proc.wait()
        handle.proc = None
        with pytest.raises(CouplingError):
            recv_report(handle, timeout=5.0)
        # no silent reabsorption: the entity stays handed off
        assert not world.entities[0].active


def test_fine_state_is_pure_function_of_inputs(tmp_path):
    def final_payload(run, decisions):
        with tiny_world() as world:
            handle = spawn(world, [2], handoff_scenario([2]),
                           str(tmp_path / run), 7, in_process=True)
            final = None
            seq = iter(decisions)

            def hook(w):
                nonlocal final
                recv_report(handle)
                out = boundary_sync(w, handle, next(seq))
                if out is not None:
                    final = out
            while final is None:
                world.step(pre_commit=hook)
            return final.payload

    a = final_payload("a", [CONTINUE, END])
    b = final_payload("b", [CONTINUE, END])
    assert a == b


# A hand-rolled client that speaks the wire protocol directly (an outside
# check of the byte format) and delays its StateReport, forcing Level 0 to
# hold the boundary open.
SLOW_CLIENT = """\
import json, socket, sys, time
directory, port = sys.argv[1], int(sys.argv[2])
meta = json.load(open(directory + "/meta.json"))
iid, step = meta["instance"], meta["start_step"]
sock = socket.create_connection(("127.0.0.1", port))
rfile = sock.makefile("rb")
def send(kind, payload):
    rec = {"kind": kind, "instance": iid, "step": step, "payload": payload}
    sock.sendall((json.dumps(rec, sort_keys=True, separators=(",", ":")) + "\\n").encode())
state = {"entities": [{"id": 0, "x": -5.0, "y": 0.0, "reached": False}], "counters": {}}
send("Hello", {})
time.sleep(0.6)  # pretend the fine step is expensive
send("StateReport", state)
decision = json.loads(rfile.readline())
assert decision["kind"] == "End", decision
send("FinalState", state)
"""


def test_boundary_not_committed_before_state_report(tmp_path):
    with tiny_world() as world:
        handle = spawn(world, [0], handoff_scenario([0]), str(tmp_path), 0,
                       launch_cmd=[sys.executable, "-c", SLOW_CLIENT], timeout=10.0)
        clock_before = world.clock
        t0 = time.perf_counter()
        world.step(pre_commit=lambda w: (
            recv_report(handle, timeout=10.0), boundary_sync(w, handle, END)))
        elapsed = time.perf_counter() - t0
        # the step blocked on the slow report before committing the boundary
        assert elapsed >= 0.5
        assert world.clock == clock_before + 1
        assert handle.status is InstanceStatus.ENDED
        assert world.entities[0].active

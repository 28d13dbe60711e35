import itertools
import random
import threading
import time

import numpy as np
import pytest

from couplet.codec import Payload
from couplet.config import ConfigDocument, load_config
from couplet.errors import Aborted, DuplicateRegistration, NotRegistered, StartupError, UnknownInstance
from couplet.kernel import Submodel
from couplet.runtime import DirectManagerClient, RunPlan, SimulationManager, run_simulation
from couplet.topology import ConduitSpec, Endpoint, InstanceSpec, ScaleSpec, Topology
from couplet.transport import Location

CONFIGS = __import__("pathlib").Path(__file__).resolve().parent.parent / "configs"
LOC = Location("127.0.0.1", 4000)


class Listener:
    def __init__(self):
        self.aborts, self.fins = [], 0

    def on_abort(self, reason):
        self.aborts.append(reason)

    def on_fin(self):
        self.fins += 1


# --- simulation manager ------------------------------------------------------


def test_resolve_blocks_until_register():
    sm = SimulationManager(["a", "b"])
    got = {}
    th = threading.Thread(target=lambda: got.setdefault("loc", sm.resolve_location("b")))
    th.start()
    time.sleep(0.1)
    assert th.is_alive() and not got
    sm.register_instance("b", LOC)
    th.join(5)
    assert got["loc"] == LOC


def test_ack_precedes_waiter_release():
    sm = SimulationManager(["a"])
    order = []
    sm.when_registered("a", lambda loc: order.append("waiter"))
    sm.register_instance("a", LOC, ack=lambda: order.append("ack"))
    assert order == ["ack", "waiter"]
    sm.when_registered("a", lambda loc: order.append("late"))
    assert order[-1] == "late"


def test_duplicate_registration_fails_fast():
    sm = SimulationManager(["a", "b"])
    lst = Listener()
    sm.subscribe(lst)
    sm.register_instance("a", LOC)
    with pytest.raises(DuplicateRegistration):
        sm.register_instance("a", LOC)
    assert sm.abort_reason and lst.aborts and sm.exit_code == 1
    with pytest.raises(Aborted):
        sm.resolve_location("b")


def test_deregister_rules():
    sm = SimulationManager(["a", "b"])
    with pytest.raises(NotRegistered):
        sm.deregister_instance("a")
    with pytest.raises(UnknownInstance):
        sm.deregister_instance("zz")
    with pytest.raises(UnknownInstance):
        sm.register_instance("zz", LOC)
    sm.register_instance("a", LOC)
    sm.deregister_instance("a")
    with pytest.raises(NotRegistered):
        sm.deregister_instance("a")
    assert not sm.finished.is_set()


def test_fin_after_all_deregister():
    sm = SimulationManager(["a", "b", "c"])
    lst = Listener()
    sm.subscribe(lst)
    for n in "abc":
        sm.register_instance(n, LOC)
    for n in "ab":
        sm.deregister_instance(n)
    assert lst.fins == 0
    sm.deregister_instance("c")
    assert lst.fins == 1 and sm.wait(1) == 0
    late = Listener()
    sm.subscribe(late)
    assert late.fins == 1
    sm.abort_all("too late")  # no abort after FIN
    assert sm.exit_code == 0 and not lst.aborts


def test_abort_is_idempotent_and_unblocks():
    sm = SimulationManager(["a", "b"])
    lst = Listener()
    sm.subscribe(lst)
    errors = []

    def waiter():
        try:
            sm.resolve_location("b")
        except Aborted as exc:
            errors.append(exc)

    threads = [threading.Thread(target=waiter) for _ in range(5)]
    for t in threads:
        t.start()
    time.sleep(0.05)
    sm.abort_all("first")
    sm.abort_all("second")
    for t in threads:
        t.join(5)
    assert len(errors) == 5 and lst.aborts == ["first"] and sm.abort_reason == "first"
    late = Listener()
    sm.subscribe(late)
    assert late.aborts == ["first"]
    with pytest.raises(Aborted):
        sm.register_instance("a", LOC)


def test_concurrent_registrations():
    names = [f"i{k}" for k in range(100)]
    sm = SimulationManager(names)
    locs = {n: Location("10.0.0.1", 5000 + k) for k, n in enumerate(names)}
    resolved = {}
    barrier = threading.Barrier(200)

    def reg(n):
        barrier.wait()
        sm.register_instance(n, locs[n])

    def res(n):
        barrier.wait()
        resolved[n] = sm.resolve_location(n, timeout=10)

    threads = [threading.Thread(target=reg, args=(n,)) for n in names]
    threads += [threading.Thread(target=res, args=(n,)) for n in names]
    random.Random(1).shuffle(threads)
    for t in threads:
        t.start()
    for t in threads:
        t.join(10)
    assert resolved == locs and sm.live_count() == 100


def test_direct_client_caches_nothing_stale():
    sm = SimulationManager(["a"])
    c = DirectManagerClient(sm)
    c.register("a", LOC)
    assert c.resolve("a") == LOC


def test_empty_simulation_finishes_immediately():
    assert SimulationManager([]).wait(0) == 0


# --- whole runs --------------------------------------------------------------


def plan_for(path, placement=None):
    return RunPlan(load_config(CONFIGS / path), placement or {})


def test_three_or_more_instances_exit_zero():
    r = run_simulation(plan_for("macro_micro_monitored.cfg"))
    assert r.ok and set(r.statuses.values()) == {"completed"}
    assert r.completions["macro"].solve_steps == 24
    assert r.completions["micro"].passes == 24
    assert r.completions["bridge"].activations == 24
    assert len(r.outputs["monitor"]) == 24


def test_two_managers_over_sockets():
    r = run_simulation(plan_for("macro_micro_monitored.cfg", {"micro": "b", "monitor": "b"}))
    assert r.ok and set(r.managers) == {"main", "b"}
    assert r.completions["micro"].passes == 24


def test_transcript_same_across_placements():
    one = run_simulation(plan_for("macro_micro_monitored.cfg"), record=True)
    two = run_simulation(plan_for("macro_micro_monitored.cfg", {"micro": "b", "bridge": "c"}), record=True)
    assert one.ok and two.ok
    assert one.transcript == two.transcript
    assert sum(len(v) for v in one.transcript.values()) == 4 * 24


def test_start_order_permutations_give_identical_transcripts():
    plan = plan_for("macro_micro_monitored.cfg")
    names = plan.doc.topology.names()
    perms = list(itertools.permutations(names))
    random.Random(3).shuffle(perms)
    reference = None
    for order in perms[:10]:
        r = run_simulation(plan, record=True, start_order=list(order), start_delay=0.002)
        assert r.ok
        if reference is None:
            reference = r.transcript
        assert r.transcript == reference


def test_unknown_implementation_is_a_startup_error():
    t = Topology([InstanceSpec("a", "submodel", "no.such.impl", {}, ScaleSpec(1, 1))])
    with pytest.raises(StartupError):
        run_simulation(RunPlan(ConfigDocument.from_topology(t)))


def test_unknown_placement_name():
    with pytest.raises(UnknownInstance):
        run_simulation(plan_for("macro_micro.cfg", {"ghost": "b"}))


# --- fail-fast -----------------------------------------------------------------


class Relay(Submodel):
    """Forwards what it hears; fails at ``fail_at`` if set."""

    def __init__(self, fail_at=None):
        self.fail_at = fail_at

    def intermediate_observation(self, t, ports):
        if ports.connected("out"):
            ports.send("out", [t], t)

    def solve_step(self, t, dt, ports):
        if self.fail_at is not None and t >= self.fail_at:
            raise RuntimeError("injected failure")
        if ports.connected("in"):
            ports.receive("in")


class Waiter(Submodel):
    def solve_step(self, t, dt, ports):
        ports.receive("in")  # nobody ever sends


@pytest.mark.parametrize("placement", [{}, {"s1": "b", "s3": "b", "w": "c"}])
def test_injected_failure_stops_everything(placement):
    inst = [InstanceSpec(f"s{i}", "submodel", "test.ring", {}, ScaleSpec(1, 1e6)) for i in range(4)]
    inst.append(InstanceSpec("w", "submodel", "test.wait", {}, ScaleSpec(1, 10)))
    cond = [ConduitSpec(Endpoint(f"s{i}", "out"), Endpoint(f"s{(i + 1) % 4}", "in")) for i in range(4)]
    cond.append(ConduitSpec(Endpoint("s0", "spare"), Endpoint("w", "in")))
    doc = ConfigDocument.from_topology(Topology(inst, cond))
    impls = {f"s{i}": Relay() for i in range(4)}
    impls["s2"] = Relay(fail_at=50)
    impls["w"] = Waiter()
    t0 = time.monotonic()
    r = run_simulation(RunPlan(doc, placement), impls=impls)
    assert time.monotonic() - t0 < 5
    assert r.exit_code != 0 and "injected failure" in r.abort_reason
    assert r.statuses["s2"] == "failed"
    assert all(r.statuses[n] == "aborted" for n in ("s0", "s1", "s3", "w"))


class Flood(Submodel):
    def __init__(self, total):
        self.total = total

    def intermediate_observation(self, t, ports):
        chunk = Payload.raw(bytes(1 << 20))
        for _ in range(self.total >> 20):
            ports.send("out", chunk, t)


class Stuck(Submodel):
    def solve_step(self, t, dt, ports):
        ports.receive("never")


class Bomb(Submodel):
    def solve_step(self, t, dt, ports):
        time.sleep(0.3)
        raise RuntimeError("bomb")


@pytest.mark.parametrize("placement", [{}, {"sink": "b"}])
def test_abort_with_64mb_in_flight(placement):
    inst = [
        InstanceSpec("flood", "submodel", "t", {}, ScaleSpec(1, 1)),
        InstanceSpec("sink", "submodel", "t", {}, ScaleSpec(1, 1)),
        InstanceSpec("bomb", "submodel", "t", {}, ScaleSpec(1, 1)),
        InstanceSpec("idle", "submodel", "t", {}, ScaleSpec(1, 1)),
    ]
    cond = [
        ConduitSpec(Endpoint("flood", "out"), Endpoint("sink", "data")),
        ConduitSpec(Endpoint("idle", "x"), Endpoint("sink", "never")),
    ]
    doc = ConfigDocument.from_topology(Topology(inst, cond))

    class Idle(Submodel):
        def solve_step(self, t, dt, ports):
            time.sleep(30)

    t0 = time.monotonic()
    r = run_simulation(RunPlan(doc, placement), impls={"flood": Flood(64 << 20), "sink": Stuck(), "bomb": Bomb(), "idle": Idle()})
    assert r.exit_code != 0 and "bomb" in r.abort_reason
    assert r.statuses["sink"] == "aborted"
    assert time.monotonic() - t0 < 10


class SendsLate(Submodel):
    def intermediate_observation(self, t, ports):
        ports.send("out", [t], t)


class ReadsOnce(Submodel):
    def solve_step(self, t, dt, ports):
        if t == 0:
            ports.receive("in")


@pytest.mark.parametrize("placement", [{}, {"b": "peer"}])
def test_message_to_finished_instance_aborts(placement):
    inst = [
        InstanceSpec("a", "submodel", "t", {}, ScaleSpec(1, 50)),
        InstanceSpec("b", "submodel", "t", {}, ScaleSpec(1, 1)),
    ]

    class Slow(SendsLate):
        def solve_step(self, t, dt, ports):
            time.sleep(0.01)

    doc = ConfigDocument.from_topology(Topology(inst, [ConduitSpec(Endpoint("a", "out"), Endpoint("b", "in"))]))
    r = run_simulation(RunPlan(doc, placement), impls={"a": Slow(), "b": ReadsOnce()})
    assert r.exit_code != 0
    assert "finished" in r.abort_reason


def test_large_message_over_sockets():
    payload = Payload.raw(np.random.default_rng(5).integers(0, 256, 64 << 20, dtype=np.uint8).tobytes())
    got = {}

    class Big(Submodel):
        def intermediate_observation(self, t, ports):
            ports.send("out", payload, t)

    class Take(Submodel):
        def solve_step(self, t, dt, ports):
            got["p"] = ports.receive("in")[0]

    inst = [InstanceSpec("a", "submodel", "t", {}, ScaleSpec(1, 1)), InstanceSpec("b", "submodel", "t", {}, ScaleSpec(1, 1))]
    doc = ConfigDocument.from_topology(Topology(inst, [ConduitSpec(Endpoint("a", "out"), Endpoint("b", "in"))]))
    r = run_simulation(RunPlan(doc, {"b": "peer"}), impls={"a": Big(), "b": Take()})
    assert r.ok and got["p"] == payload

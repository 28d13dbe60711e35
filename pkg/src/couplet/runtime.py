"""Simulation Manager, Local Managers and the run driver.

The Simulation Manager is the registry: instances register their location,
other managers look locations up (blocking until registration), and once
every declared instance has deregistered it sends FIN to all managers. Any
failure anywhere triggers :meth:`SimulationManager.abort_all`, which
broadcasts ABORT and unblocks everything that waits.

A Local Manager hosts a subset of the instances, one thread each, delivers
messages between them in-process and over sockets, and bridges external
processes that speak the frame protocol.
"""

from __future__ import annotations

import logging
import os
import shlex
import socket
import subprocess
import sys
import threading
import time
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Iterable

from .codec import Abort, Data, Deregister, Fin, Frame, Location as LocationFrame, Lookup, Register, RegisterAck, encode_frame
from .config import ConfigDocument
from .errors import (
    Aborted,
    BadHandshake,
    ChannelClosed,
    CoupletError,
    DuplicateRegistration,
    InvalidTopology,
    NotRegistered,
    PeerUnreachable,
    QueueClosed,
    UnknownInstance,
)
from .kernel import EXTERNAL, Completion, OutPort, Ports, apply_filter_chain, lookup_impl, run_instance
from .topology import Topology, validate_topology
from .transport import (
    ChannelRef,
    FrameSocket,
    Listener,
    Location,
    Message,
    OutboundRouter,
    PortQueue,
    PortRange,
    read_frame,
    send,
)

log = logging.getLogger(__name__)

ENV_MANAGER = "COUPLET_MANAGER"
ENV_INSTANCE = "COUPLET_INSTANCE"
FIN_GRACE = 30.0
ABORT_GRACE = 5.0
IN_PROCESS = Location("in-process", 0)


# --- simulation manager ------------------------------------------------------


@dataclass
class RegistryEntry:
    name: str
    location: Location
    state: str = "registered"  # or "deregistered"


class SimulationManager:
    """Registry of instance locations and lifecycle for one simulation.

    Listeners are objects with ``on_abort(reason)`` and ``on_fin()``.
    """

    def __init__(self, names: Iterable[str]):
        self.declared = list(names)
        self._declared = set(self.declared)
        self._entries: dict[str, RegistryEntry] = {}
        self._cond = threading.Condition()
        self._waiters: dict[str, list[Callable[[Location], None]]] = {}
        self._listeners: list = []
        self.abort_reason: str | None = None
        self.finished = threading.Event()
        self.fin_sent = False
        if not self._declared:
            self._finish()

    @property
    def exit_code(self) -> int | None:
        if not self.finished.is_set():
            return None
        return 0 if self.abort_reason is None else 1

    def subscribe(self, listener) -> None:
        with self._cond:
            self._listeners.append(listener)
            fin, reason = self.fin_sent, self.abort_reason
        if reason is not None:
            listener.on_abort(reason)
        elif fin:
            listener.on_fin()

    def unsubscribe(self, listener) -> None:
        with self._cond:
            if listener in self._listeners:
                self._listeners.remove(listener)

    def entry(self, name: str) -> RegistryEntry | None:
        with self._cond:
            return self._entries.get(name)

    def live_count(self) -> int:
        with self._cond:
            return sum(1 for e in self._entries.values() if e.state == "registered")

    def register_instance(self, name: str, location: Location, ack: Callable[[], None] | None = None) -> bool:
        """Store ``name``'s location and release everyone waiting on it.

        ``ack`` runs after the entry is stored and before waiters are
        released, so no lookup can see a location ahead of its acknowledgement.
        """
        with self._cond:
            if self.abort_reason is not None:
                raise Aborted(self.abort_reason)
            if name not in self._declared:
                raise UnknownInstance(name)
            current = self._entries.get(name)
            duplicate = current is not None and current.state == "registered"
            if not duplicate:
                self._entries[name] = RegistryEntry(name, Location(*location))
                if ack is not None:
                    ack()
                waiters = self._waiters.pop(name, [])
                self._cond.notify_all()
        if duplicate:
            self.abort_all(f"duplicate registration of {name!r}")
            raise DuplicateRegistration(name)
        for cb in waiters:
            cb(Location(*location))
        return True

    def when_registered(self, name: str, callback: Callable[[Location], None]) -> None:
        """Call ``callback(location)`` once ``name`` is registered (maybe right away)."""
        with self._cond:
            if name not in self._declared:
                raise UnknownInstance(name)
            e = self._entries.get(name)
            if e is None:
                self._waiters.setdefault(name, []).append(callback)
                return
        callback(e.location)

    def resolve_location(self, name: str, timeout: float | None = None) -> Location:
        with self._cond:
            if name not in self._declared:
                raise UnknownInstance(name)
            ok = self._cond.wait_for(lambda: name in self._entries or self.abort_reason is not None, timeout)
            if self.abort_reason is not None:
                raise Aborted(self.abort_reason)
            if not ok:
                raise TimeoutError(name)
            return self._entries[name].location

    def deregister_instance(self, name: str) -> None:
        with self._cond:
            if name not in self._declared:
                raise UnknownInstance(name)
            e = self._entries.get(name)
            if e is None or e.state != "registered":
                raise NotRegistered(name)
            e.state = "deregistered"
            done = len(self._entries) == len(self._declared) and all(
                x.state == "deregistered" for x in self._entries.values()
            )
        if done:
            self._finish()

    def _finish(self) -> None:
        with self._cond:
            if self.fin_sent or self.abort_reason is not None:
                return
            self.fin_sent = True
            listeners = list(self._listeners)
        log.debug("all instances deregistered, sending FIN")
        for lst in listeners:
            lst.on_fin()
        self.finished.set()

    def abort_all(self, reason: str) -> None:
        """Broadcast ABORT and unblock every waiter. Idempotent."""
        with self._cond:
            if self.abort_reason is not None or self.fin_sent:
                return
            self.abort_reason = reason
            self._waiters.clear()
            self._cond.notify_all()
            listeners = list(self._listeners)
        log.error("aborting simulation: %s", reason)
        for lst in listeners:
            try:
                lst.on_abort(reason)
            except Exception:  # a dead listener must not stop the broadcast
                log.exception("abort listener failed")
        self.finished.set()

    def wait(self, timeout: float | None = None) -> int | None:
        self.finished.wait(timeout)
        return self.exit_code


class _ManagerConnection:
    """Server side of one Local Manager's connection to the Simulation Manager."""

    def __init__(self, server: "SimulationManagerServer", sock: socket.socket):
        self.server = server
        self.sm = server.sm
        self.got_fin = False
        self.closed = threading.Event()
        self.link = FrameSocket(sock, on_frame=self._on_frame, on_error=self._on_error, on_close=self._on_close, name="sm-conn", start_reading=False)
        self.sm.subscribe(self)
        self.link.start_reading()

    def on_abort(self, reason: str) -> None:
        self._send(Abort(reason))

    def on_fin(self) -> None:
        self.got_fin = True
        self._send(Fin())

    def _send(self, frame: Frame) -> None:
        try:
            self.link.send_frame(frame)
        except ChannelClosed:
            pass

    def _on_frame(self, f: Frame) -> None:
        sm = self.sm
        try:
            if isinstance(f, Register):
                try:
                    sm.register_instance(f.name, Location(f.host, f.port), ack=lambda: self._send(RegisterAck(True)))
                except (UnknownInstance, DuplicateRegistration, Aborted) as exc:
                    self._send(RegisterAck(False))
                    if isinstance(exc, UnknownInstance):
                        sm.abort_all(f"registration of undeclared instance {f.name!r}")
            elif isinstance(f, Lookup):
                sm.when_registered(
                    f.name, lambda loc, name=f.name: self._send(LocationFrame(name, loc.host, loc.port))
                )
            elif isinstance(f, Deregister):
                sm.deregister_instance(f.name)
            elif isinstance(f, Abort):
                sm.abort_all(f.reason)
            else:
                sm.abort_all(f"unexpected {type(f).__name__} frame at simulation manager")
        except CoupletError as exc:
            sm.abort_all(f"simulation manager: {exc}")

    def _on_error(self, exc: Exception) -> None:
        self._lost(str(exc))

    def _on_close(self) -> None:
        self._lost("connection closed")

    def _lost(self, why: str) -> None:
        if not self.sm.fin_sent:
            self.sm.abort_all(f"lost connection to a local manager: {why}")
        self.sm.unsubscribe(self)
        self.closed.set()
        self.link.abort()


class SimulationManagerServer:
    """TCP front end of a :class:`SimulationManager`."""

    def __init__(self, sm: SimulationManager, host: str = "127.0.0.1", port: int = 0):
        self.sm = sm
        self._conns: list[_ManagerConnection] = []
        self._lock = threading.Lock()
        self._listener = Listener(self._accept, host=host, ports=port, name="sim-manager")
        self.address = self._listener.address

    def start(self) -> "SimulationManagerServer":
        self._listener.start()
        return self

    def _accept(self, sock: socket.socket, addr) -> None:
        conn = _ManagerConnection(self, sock)
        with self._lock:
            self._conns.append(conn)

    def wait_closed(self, timeout: float = FIN_GRACE) -> bool:
        """After FIN: give managers ``timeout`` seconds to hang up."""
        deadline = time.monotonic() + timeout
        with self._lock:
            conns = list(self._conns)
        ok = True
        for c in conns:
            ok &= c.closed.wait(max(0.0, deadline - time.monotonic()))
        return ok

    def close(self) -> None:
        self._listener.close()
        with self._lock:
            conns = list(self._conns)
        for c in conns:
            c.link.abort()


# --- clients used by local managers ------------------------------------------


class DirectManagerClient:
    """In-process access to a :class:`SimulationManager`."""

    def __init__(self, sm: SimulationManager):
        self.sm = sm
        self._cache: dict[str, Location] = {}

    def connect(self, listener) -> None:
        self._listener = listener
        self.sm.subscribe(listener)

    def register(self, name: str, location: Location) -> None:
        self.sm.register_instance(name, location)

    def resolve(self, name: str) -> Location:
        loc = self._cache.get(name)
        if loc is None:
            loc = self._cache[name] = self.sm.resolve_location(name)
        return loc

    def deregister(self, name: str) -> None:
        self.sm.deregister_instance(name)

    def abort(self, reason: str) -> None:
        self.sm.abort_all(reason)

    def close(self) -> None:
        self.sm.unsubscribe(self._listener)


class RemoteManagerClient:
    """Frame-protocol client for a Simulation Manager at ``address``."""

    def __init__(self, address: Location, connect_timeout: float = 30.0):
        self.address = address
        self._connect_timeout = connect_timeout
        self._cond = threading.Condition()
        self._acks: deque = deque()
        self._cache: dict[str, Location] = {}
        self._asked: set[str] = set()
        self._abort_reason: str | None = None
        self._fin = False
        self._link: FrameSocket | None = None
        self._listener = None

    def connect(self, listener) -> None:
        self._listener = listener
        deadline = time.monotonic() + self._connect_timeout
        while True:
            try:
                sock = socket.create_connection(tuple(self.address), timeout=5)
                sock.settimeout(None)
                break
            except OSError as exc:
                if time.monotonic() > deadline:
                    raise PeerUnreachable(f"simulation manager at {self.address}: {exc}") from exc
                time.sleep(0.1)
        self._link = FrameSocket(
            sock, on_frame=self._on_frame, on_error=self._on_error, on_close=self._on_close, name="sm-client", start_reading=False
        )
        self._link.start_reading()

    def _on_frame(self, f: Frame) -> None:
        if isinstance(f, RegisterAck):
            with self._cond:
                slot = self._acks.popleft() if self._acks else None
                if slot is not None:
                    slot.append(f.ok)
                self._cond.notify_all()
        elif isinstance(f, LocationFrame):
            with self._cond:
                self._cache[f.name] = Location(f.host, f.port)
                self._cond.notify_all()
        elif isinstance(f, Abort):
            self._aborted(f.reason)
        elif isinstance(f, Fin):
            with self._cond:
                self._fin = True
                self._cond.notify_all()
            self._listener.on_fin()

    def _aborted(self, reason: str) -> None:
        with self._cond:
            if self._abort_reason is None:
                self._abort_reason = reason
            self._cond.notify_all()
        self._listener.on_abort(reason)

    def _on_error(self, exc: Exception) -> None:
        if not self._fin:
            self._aborted(f"lost connection to simulation manager: {exc}")

    def _on_close(self) -> None:
        if not self._fin:
            self._aborted("simulation manager closed the connection")

    def _send(self, frame: Frame) -> None:
        try:
            self._link.send_frame(frame)
        except ChannelClosed:
            raise Aborted(self._abort_reason or "simulation manager connection closed") from None

    def register(self, name: str, location: Location) -> None:
        slot: list = []
        with self._cond:
            if self._abort_reason is not None:
                raise Aborted(self._abort_reason)
            self._acks.append(slot)
            # enqueue under the lock so ack order matches request order
            self._send(Register(name, location.host, location.port))
            self._cond.wait_for(lambda: slot or self._abort_reason is not None)
            if not slot:
                raise Aborted(self._abort_reason)
        if not slot[0]:
            raise DuplicateRegistration(f"{name} rejected by simulation manager")

    def resolve(self, name: str) -> Location:
        with self._cond:
            if name not in self._cache and name not in self._asked:
                self._asked.add(name)
                self._send(Lookup(name))
            self._cond.wait_for(lambda: name in self._cache or self._abort_reason is not None)
            if self._abort_reason is not None:
                raise Aborted(self._abort_reason)
            return self._cache[name]

    def deregister(self, name: str) -> None:
        self._send(Deregister(name))

    def abort(self, reason: str) -> None:
        try:
            self._send(Abort(reason))
        except Aborted:
            pass

    def close(self) -> None:
        if self._link is not None:
            self._link.close(timeout=5)


# --- local manager -----------------------------------------------------------


@dataclass
class ManagerEndpoint:
    """Network settings of one Local Manager."""

    host: str = "127.0.0.1"
    port_range: PortRange | None = None
    relay: Location | None = None


@dataclass
class RunPlan:
    doc: ConfigDocument
    placement: dict[str, str] = field(default_factory=dict)
    managers: dict[str, ManagerEndpoint] = field(default_factory=dict)

    DEFAULT = "main"

    def manager_of(self, name: str) -> str:
        return self.placement.get(name, self.DEFAULT)

    def manager_ids(self) -> list[str]:
        ids = {self.manager_of(n) for n in self.doc.topology.names()}
        return sorted(ids) or [self.DEFAULT]

    def instances_on(self, manager_id: str) -> list[str]:
        return [n for n in self.doc.topology.names() if self.manager_of(n) == manager_id]

    def check(self, provided: Iterable[str] = (), manager_id: str | None = None) -> None:
        """Validate topology and placement, and find the implementations.

        With ``manager_id`` only that manager's implementations are looked up.
        """
        t = self.doc.topology
        provided = set(provided)
        violations = validate_topology(t)
        if violations:
            raise InvalidTopology(violations)
        names = set(t.names())
        for name in self.placement:
            if name not in names:
                raise UnknownInstance(name)
        for inst in t.instances:
            if manager_id is not None and self.manager_of(inst.name) != manager_id:
                continue
            if inst.impl_id != EXTERNAL and inst.name not in provided:
                lookup_impl(inst.impl_id)


@dataclass
class ManagerReport:
    manager_id: str
    exit_code: int
    statuses: dict[str, str] = field(default_factory=dict)
    timings: dict[str, float] = field(default_factory=dict)
    errors: dict[str, str] = field(default_factory=dict)
    completions: dict[str, Completion] = field(default_factory=dict)
    outputs: dict[str, object] = field(default_factory=dict)
    transcript: dict[str, list[tuple[float, bytes]]] = field(default_factory=dict)
    external_exit: dict[str, int] = field(default_factory=dict)
    abort_reason: str | None = None


class _ExternalSession:
    """Bridge between an external process and the runtime."""

    def __init__(self, lm: "LocalManager", name: str, link: FrameSocket):
        self.lm = lm
        self.name = name
        self.link = link
        self.finished = False
        self.started = time.monotonic()

    def forward_inputs(self) -> None:
        ports = self.lm.ports[self.name]
        live = dict(ports.inputs)
        try:
            while live:
                progressed = False
                for port, q in list(live.items()):
                    try:
                        msg = q.try_get()
                    except QueueClosed:
                        del live[port]
                        # towards an external, DEREGISTER names the in-port that closed
                        self.link.send_frame(Deregister(port))
                        progressed = True
                        continue
                    if msg is not None:
                        self.lm.record(port=str(msg.dst), msg=msg)
                        self.link.send_frame(msg.to_frame())
                        progressed = True
                if not progressed and live:
                    cond = next(iter(live.values())).cond
                    with cond:
                        cond.wait_for(lambda: any(q._ready() for q in live.values()))
        except (Aborted, ChannelClosed):
            return

    def on_frame(self, f: Frame) -> None:
        lm = self.lm
        try:
            if isinstance(f, Data):
                out = lm.ports[self.name].outputs.get(f.src.port)
                if out is None or f.src.instance != self.name:
                    raise CoupletError(f"external {self.name}: no conduit from {f.src}")
                payload = apply_filter_chain(out.filters, f.payload)
                send(out.channel, Message(out.conduit.src, out.conduit.dst, f.timestamp, payload))
            elif isinstance(f, Fin):
                self.finished = True
                lm.instance_finished(self.name, time.monotonic() - self.started)
                self.link.send_frame(Fin())
                self.link.close(timeout=5)
            elif isinstance(f, Abort):
                lm.fail(self.name, f"external instance {self.name}: {f.reason}")
            else:
                raise CoupletError(f"external {self.name}: unexpected {type(f).__name__} frame")
        except Aborted:
            pass
        except Exception as exc:
            lm.fail(self.name, f"external {self.name}: {exc}")

    def on_lost(self, exc: Exception | None = None) -> None:
        if not self.finished:
            self.lm.fail(self.name, f"external instance {self.name} disconnected")


class LocalManager:
    """Hosts the instances placed on one manager and routes their traffic."""

    def __init__(
        self,
        doc: ConfigDocument,
        instances: Iterable[str],
        client,
        manager_id: str = RunPlan.DEFAULT,
        endpoint: ManagerEndpoint | None = None,
        distributed: bool = False,
        record: bool = False,
        start_order: list[str] | None = None,
        start_delay: float = 0.0,
        provided: dict[str, object] | None = None,
    ):
        self.provided = provided or {}
        self.doc = doc
        self.topology: Topology = doc.topology
        self.local = list(instances)
        self.client = client
        self.manager_id = manager_id
        self.endpoint = endpoint or ManagerEndpoint()
        self.distributed = distributed
        self.record_enabled = record
        self.start_order = start_order
        self.start_delay = start_delay

        self._lock = threading.Lock()
        self._done = threading.Event()
        self._fin = False
        self.abort_reason: str | None = None
        self.ports: dict[str, Ports] = {}
        self.statuses: dict[str, str] = {n: "pending" for n in self.local}
        self.errors: dict[str, str] = {}
        self.timings: dict[str, float] = {}
        self.completions: dict[str, Completion] = {}
        self.outputs: dict[str, object] = {}
        self.external_exit: dict[str, int] = {}
        self.transcript: dict[str, list[tuple[float, bytes]]] = {}
        self._queues: list[PortQueue] = []
        self._threads: list[threading.Thread] = []
        self._sessions: dict[str, _ExternalSession] = {}
        self._procs: dict[str, subprocess.Popen] = {}
        self._peer_links: list[FrameSocket] = []
        self.listener: Listener | None = None
        self.controller: Listener | None = None
        self.location = IN_PROCESS
        self.router: OutboundRouter | None = None

    # -- lifecycle ----------------------------------------------------------

    def setup(self) -> None:
        t = self.topology
        local = set(self.local)
        specs = {i.name: i for i in t.instances}
        self.impls = {}
        for name in self.local:
            if name not in specs:
                raise UnknownInstance(name)
            if name in self.provided:
                self.impls[name] = self.provided[name]
            elif specs[name].impl_id != EXTERNAL:
                self.impls[name] = lookup_impl(specs[name].impl_id)()
        self.externals = [n for n in self.local if specs[n].impl_id == EXTERNAL]

        ep = self.endpoint
        needs_listener = self.distributed or any(
            c.dst.instance in local and c.src.instance not in local for c in t.conduits
        )
        if needs_listener:
            self.listener = Listener(self._accept_peer, host=ep.host, ports=ep.port_range or 0, name=f"{self.manager_id}-data")
            self.location = self.listener.address
        if self.externals:
            self.controller = Listener(self._accept_external, host=ep.host, ports=0, name=f"{self.manager_id}-controller")
        self.router = OutboundRouter(
            resolve=self.client.resolve,
            on_failure=self._link_failure,
            relay=ep.relay,
            local_range=ep.port_range,
            on_frame=self._on_back_frame,
            name=self.manager_id,
        )

        conds = {n: threading.Condition() for n in self.local}
        self.ports = {n: Ports(name=n) for n in self.local}
        for n in self.local:
            if self.record_enabled:
                self.ports[n].on_receive = lambda port, msg, n=n: self.record(f"{n}.{port}", msg)
        for c in t.conduits:
            if c.dst.instance in local:
                q = PortQueue(str(c.dst), cond=conds[c.dst.instance])
                self._queues.append(q)
                self.ports[c.dst.instance].inputs[c.dst.port] = q
        for c in t.conduits:
            if c.src.instance not in local:
                continue
            if c.dst.instance in local:
                ch = ChannelRef("in_process", queue=self.ports[c.dst.instance].inputs[c.dst.port], zero_copy=c.zero_copy)
            else:
                ch = ChannelRef("socket", router=self.router, dst_instance=c.dst.instance)
            self.ports[c.src.instance].outputs[c.src.port] = OutPort.for_conduit(c, ch)

    def run(self) -> ManagerReport:
        try:
            self.setup()
        except Exception:
            self._close_listeners()
            raise
        if self.listener is not None:
            self.listener.start()
        if self.controller is not None:
            self.controller.start()
        self.client.connect(self)

        order = list(self.start_order) if self.start_order else list(self.local)
        order = [n for n in order if n in self.impls] + [n for n in self.local if n in self.impls and n not in order]
        for i, name in enumerate(order):
            if i and self.start_delay:
                time.sleep(self.start_delay)
            th = threading.Thread(target=self._instance_main, args=(name,), name=f"inst-{name}", daemon=True)
            self._threads.append(th)
            th.start()
        for name in self.externals:
            self.statuses[name] = "waiting"
            self._spawn_external(name)

        self._done.wait()
        self._shutdown()
        return self.report()

    def _shutdown(self) -> None:
        grace = ABORT_GRACE if self.abort_reason else FIN_GRACE
        deadline = time.monotonic() + grace
        for th in self._threads:
            th.join(max(0.0, deadline - time.monotonic()))
        if self.abort_reason is None:
            self.router.close()
        else:
            self.router.abort(self.abort_reason)
        for name, p in self._procs.items():
            try:
                self.external_exit[name] = p.wait(max(0.1, deadline - time.monotonic()))
            except subprocess.TimeoutExpired:
                p.kill()
        self._close_listeners()
        for link in self._peer_links:
            link.abort()
        self.client.close()

    def _close_listeners(self) -> None:
        for lst in (self.listener, self.controller):
            if lst is not None:
                lst.close()

    def report(self) -> ManagerReport:
        clean = self.abort_reason is None and self._fin and all(s == "completed" for s in self.statuses.values())
        return ManagerReport(
            manager_id=self.manager_id,
            exit_code=0 if clean else 2,
            statuses=dict(self.statuses),
            timings=dict(self.timings),
            errors=dict(self.errors),
            completions=dict(self.completions),
            outputs=dict(self.outputs),
            transcript={k: list(v) for k, v in self.transcript.items()},
            external_exit=dict(self.external_exit),
            abort_reason=self.abort_reason,
        )

    # -- instances ----------------------------------------------------------

    def _instance_main(self, name: str) -> None:
        spec = self.topology.instance(name)
        impl = self.impls[name]
        started = time.monotonic()
        try:
            self.client.register(name, self.location)
            self.statuses[name] = "running"
            self.completions[name] = run_instance(spec, impl, self.ports[name])
            self.outputs[name] = getattr(impl, "result", None)
        except Aborted as exc:
            self.statuses[name] = "aborted"
            self.errors.setdefault(name, exc.reason)
            return
        except BaseException as exc:
            self.statuses[name] = "failed"
            self.errors[name] = f"{type(exc).__name__}: {exc}"
            log.error("instance %s failed: %s", name, self.errors[name])
            self.fail(name, f"instance {name} failed: {type(exc).__name__}: {exc}")
            return
        try:
            self.instance_finished(name, time.monotonic() - started)
        except Aborted:
            pass
        except CoupletError as exc:
            self.fail(name, f"instance {name}: {exc}")

    def instance_finished(self, name: str, elapsed: float) -> None:
        """Close the instance's conduits, then deregister it."""
        ports = self.ports[name]
        notified: set[str] = set()
        for out in ports.outputs.values():
            ch = out.channel
            if ch.kind == "in_process":
                ch.queue.close_producer()
            elif ch.dst_instance not in notified:
                notified.add(ch.dst_instance)
                self.router.post(ch.dst_instance, encode_frame(Deregister(name)))
        for port, q in ports.inputs.items():
            unread = q.close_receiver()
            if unread:
                log.warning("%s.%s finished with %d unread message(s)", name, port, unread)
        self.timings[name] = elapsed
        self.statuses[name] = "completed"
        self.client.deregister(name)

    def record(self, port: str, msg: Message) -> None:
        if not self.record_enabled:
            return
        with self._lock:
            self.transcript.setdefault(port, []).append((msg.timestamp, msg.payload.to_bytes()))

    # -- failure handling ---------------------------------------------------

    def fail(self, who: str, reason: str) -> None:
        """Local failure: abort here and tell the Simulation Manager."""
        self.on_abort(reason)
        try:
            self.client.abort(reason)
        except Exception:
            pass

    def _link_failure(self, exc: Exception) -> None:
        if self._fin or self.abort_reason is not None:
            return
        self.fail(self.manager_id, f"{self.manager_id}: {exc}")

    def on_abort(self, reason: str) -> None:
        with self._lock:
            if self.abort_reason is not None or self._fin:
                return
            self.abort_reason = reason
        for q in self._queues:
            q.abort(reason)
        if self.router is not None:
            self.router.abort(reason)
        for s in list(self._sessions.values()):
            try:
                s.link.send_frame(Abort(reason))
            except ChannelClosed:
                pass
            s.link.close(timeout=1)
        for p in self._procs.values():
            if p.poll() is None:
                p.terminate()
        for name, st in self.statuses.items():
            if st in ("pending", "waiting"):
                self.statuses[name] = "aborted"
        self._done.set()

    def on_fin(self) -> None:
        with self._lock:
            if self.abort_reason is not None:
                return
            self._fin = True
        self._done.set()

    # -- sockets ------------------------------------------------------------

    def _on_back_frame(self, f: Frame) -> None:
        # frames coming back on outbound links: only a relay sends any
        if isinstance(f, Abort):
            self.fail(self.manager_id, f.reason)

    def _accept_peer(self, sock: socket.socket, addr) -> None:
        link = FrameSocket(sock, on_frame=self._on_peer_frame, on_error=self._link_failure, name=f"{self.manager_id}<-peer")
        self._peer_links.append(link)

    def _on_peer_frame(self, f: Frame) -> None:
        try:
            if isinstance(f, Data):
                q = self.ports.get(f.dst.instance)
                q = q.inputs.get(f.dst.port) if q else None
                if q is None:
                    raise CoupletError(f"{self.manager_id}: no local in-port {f.dst}")
                try:
                    q.put(Message.from_frame(f))
                except ChannelClosed:
                    raise CoupletError(f"message for {f.dst} after its instance finished") from None
            elif isinstance(f, Deregister):
                for c in self.topology.conduits_from(f.name):
                    q = self.ports.get(c.dst.instance)
                    if q is not None and c.dst.port in q.inputs:
                        q.inputs[c.dst.port].close_producer()
            elif isinstance(f, Abort):
                self.fail(self.manager_id, f.reason)
        except Aborted:
            pass
        except Exception as exc:
            self.fail(self.manager_id, str(exc))

    def _accept_external(self, sock: socket.socket, addr) -> None:
        threading.Thread(target=self.attach_external_instance, args=(sock,), name="external-handshake", daemon=True).start()

    def attach_external_instance(self, sock: socket.socket) -> _ExternalSession | None:
        """Handshake with an external process; on success it acts as a local instance."""
        sock.settimeout(FIN_GRACE)
        try:
            first = read_frame(sock)
        except Exception as exc:
            first = exc
        sock.settimeout(None)
        try:
            if not isinstance(first, Register):
                raise BadHandshake(f"expected REGISTER, got {type(first).__name__}")
            name = first.name
            if name not in self.externals:
                raise UnknownInstance(name)
        except (BadHandshake, UnknownInstance) as exc:
            log.error("rejected external connection: %s", exc)
            try:
                sock.sendall(encode_frame(Abort(str(exc))))
            except OSError:
                pass
            sock.close()
            return None
        with self._lock:
            duplicate = name in self._sessions
        if duplicate:
            sock.close()
            self.fail(name, f"duplicate external registration of {name!r}")
            return None
        try:
            self.client.register(name, self.location)
        except (Aborted, DuplicateRegistration) as exc:
            sock.close()
            self.fail(name, f"external {name}: {exc}")
            return None
        session_holder: list[_ExternalSession] = []
        link = FrameSocket(
            sock,
            on_frame=lambda f: session_holder[0].on_frame(f),
            on_error=lambda e: session_holder[0].on_lost(e),
            on_close=lambda: session_holder[0].on_lost(),
            name=f"external-{name}",
            start_reading=False,
        )
        session = _ExternalSession(self, name, link)
        session_holder.append(session)
        with self._lock:
            self._sessions[name] = session
        self.statuses[name] = "running"
        link.send_frame(RegisterAck(True))
        link.start_reading()
        threading.Thread(target=session.forward_inputs, name=f"forward-{name}", daemon=True).start()
        return session

    def _spawn_external(self, name: str) -> None:
        cmd = self.topology.instance(name).params.get("command")
        if not cmd:
            log.info("waiting for external instance %s at %s", name, self.controller.address)
            return
        env = dict(os.environ)
        env[ENV_MANAGER] = str(self.controller.address)
        env[ENV_INSTANCE] = name
        argv = shlex.split(cmd)
        if argv and argv[0] == "python":
            argv[0] = sys.executable
        proc = subprocess.Popen(argv, env=env)
        self._procs[name] = proc

        def watch():
            code = proc.wait()
            self.external_exit[name] = code
            session = self._sessions.get(name)
            if code != 0 and not (session and session.finished):
                self.fail(name, f"external {name} exited with code {code}")

        threading.Thread(target=watch, name=f"watch-{name}", daemon=True).start()


# --- run driver --------------------------------------------------------------


@dataclass
class RunReport:
    exit_code: int
    statuses: dict[str, str]
    timings: dict[str, float]
    wall_time: float
    abort_reason: str | None = None
    errors: dict[str, str] = field(default_factory=dict)
    completions: dict[str, Completion] = field(default_factory=dict)
    outputs: dict[str, object] = field(default_factory=dict)
    transcript: dict[str, list[tuple[float, bytes]]] = field(default_factory=dict)
    external_exit: dict[str, int] = field(default_factory=dict)
    managers: dict[str, ManagerReport] = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return self.exit_code == 0


def _merge(reports: list[ManagerReport], wall: float, sm: SimulationManager) -> RunReport:
    out = RunReport(exit_code=0, statuses={}, timings={}, wall_time=wall)
    for r in reports:
        out.statuses.update(r.statuses)
        out.timings.update(r.timings)
        out.errors.update(r.errors)
        out.completions.update(r.completions)
        out.outputs.update(r.outputs)
        out.external_exit.update(r.external_exit)
        for k, v in r.transcript.items():
            out.transcript.setdefault(k, []).extend(v)
        out.managers[r.manager_id] = r
        if r.exit_code != 0:
            out.exit_code = 2
    out.abort_reason = sm.abort_reason or next((r.abort_reason for r in reports if r.abort_reason), None)
    if out.abort_reason is not None or sm.exit_code != 0:
        out.exit_code = 2
    return out


def run_simulation(
    plan: RunPlan,
    *,
    record: bool = False,
    start_order: list[str] | None = None,
    start_delay: float = 0.0,
    force_sockets: bool = False,
    impls: dict[str, object] | None = None,
) -> RunReport:
    """Run a whole plan inside this process and wait for it to finish.

    With a single manager everything is in-process. With several managers
    the Simulation Manager listens on loopback and every Local Manager talks
    to it, and to its peers, over sockets, as separate processes would.
    ``impls`` supplies ready-made implementation objects by instance name.
    """
    impls = impls or {}
    plan.check(impls)
    names = plan.doc.topology.names()
    sm = SimulationManager(names)
    ids = plan.manager_ids()
    t0 = time.monotonic()
    if len(ids) == 1 and not force_sockets:
        lm = LocalManager(
            plan.doc,
            plan.instances_on(ids[0]),
            DirectManagerClient(sm),
            manager_id=ids[0],
            endpoint=plan.managers.get(ids[0]),
            record=record,
            start_order=start_order,
            start_delay=start_delay,
            provided=impls,
        )
        reports = [lm.run()]
        return _merge(reports, time.monotonic() - t0, sm)

    server = SimulationManagerServer(sm).start()
    reports: list[ManagerReport] = []
    failures: list[BaseException] = []

    def run_one(mid: str) -> None:
        lm = LocalManager(
            plan.doc,
            plan.instances_on(mid),
            RemoteManagerClient(server.address),
            manager_id=mid,
            endpoint=plan.managers.get(mid),
            distributed=True,
            record=record,
            start_order=start_order,
            start_delay=start_delay,
            provided=impls,
        )
        try:
            reports.append(lm.run())
        except BaseException as exc:
            failures.append(exc)
            sm.abort_all(f"manager {mid} failed to start: {exc}")

    threads = [threading.Thread(target=run_one, args=(mid,), name=f"lm-{mid}") for mid in ids]
    for th in threads:
        th.start()
    for th in threads:
        th.join()
    sm.wait()
    server.wait_closed(5.0)
    server.close()
    if failures and not reports:
        raise failures[0]
    return _merge(reports, time.monotonic() - t0, sm)


def host_manager(
    plan: RunPlan,
    manager_id: str = RunPlan.DEFAULT,
    listen: Location = Location("127.0.0.1", 0),
    on_listening: Callable[[Location], None] | None = None,
) -> ManagerReport:
    """Run the Simulation Manager plus the Local Manager ``manager_id``.

    Other managers of the plan join over the network with :func:`join_manager`.
    """
    plan.check(manager_id=manager_id)
    sm = SimulationManager(plan.doc.topology.names())
    distributed = plan.manager_ids() != [manager_id]
    server = SimulationManagerServer(sm, listen.host, listen.port).start() if distributed else None
    if on_listening is not None and server is not None:
        on_listening(server.address)
    lm = LocalManager(
        plan.doc,
        plan.instances_on(manager_id),
        DirectManagerClient(sm),
        manager_id=manager_id,
        endpoint=plan.managers.get(manager_id),
        distributed=distributed,
    )
    try:
        report = lm.run()
    except BaseException as exc:
        sm.abort_all(f"manager {manager_id} failed to start: {exc}")
        raise
    finally:
        if server is not None:
            sm.wait(ABORT_GRACE)
            server.wait_closed(FIN_GRACE if sm.abort_reason is None else ABORT_GRACE)
            server.close()
    if sm.abort_reason is not None:
        report.exit_code = 2
        report.abort_reason = report.abort_reason or sm.abort_reason
    return report


def join_manager(plan: RunPlan, manager_id: str, sm_address: Location) -> ManagerReport:
    """Run Local Manager ``manager_id`` against a remote Simulation Manager."""
    plan.check(manager_id=manager_id)
    lm = LocalManager(
        plan.doc,
        plan.instances_on(manager_id),
        RemoteManagerClient(sm_address),
        manager_id=manager_id,
        endpoint=plan.managers.get(manager_id),
        distributed=True,
    )
    return lm.run()

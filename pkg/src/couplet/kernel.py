"""Submodel-facing API: the execution loop, phase-checked port I/O, filters.

A submodel implementation subclasses :class:`Submodel` and is driven through
the loop::

    init -> (intermediate_observation -> solve_step)* -> final_observation

During ``init`` and ``solve_step`` only input may be requested; during the
observations only output may be sent. Mappers, sources and sinks have their
own, simpler drivers.
"""

from __future__ import annotations

import enum
import math
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np

from .codec import Payload, PayloadType
from .errors import (
    CoupletError,
    Malformed,
    PhaseViolation,
    QueueClosed,
    StartupError,
    TimestampRegression,
    TypeMismatch,
    UnconnectedPort,
)
from .topology import ConduitSpec, FilterSpec, InstanceSpec, ScaleSpec
from .transport import ChannelRef, Message, PortQueue, send

# --- implementations ---------------------------------------------------------


class Submodel:
    """Base class for single-scale submodels. Override the callbacks you need."""

    kind = "submodel"
    strict = True
    restart_port = "restart"

    def init(self, t0: float, ports: "Ports") -> None:
        pass

    def intermediate_observation(self, t: float, ports: "Ports") -> None:
        pass

    def solve_step(self, t: float, dt: float, ports: "Ports") -> None:
        pass

    def final_observation(self, t: float, ports: "Ports") -> None:
        pass


class Mapper:
    """Fires once every in-port has a message; ``inputs`` maps port to (payload, t)."""

    kind = "mapper"

    def activate(self, inputs: dict[str, tuple[Payload, float]], ports: "Ports") -> None:
        raise NotImplementedError


class Source:
    """Yields ``(port, payload, t)`` triples until exhausted."""

    kind = "source"

    def produce(self, ports: "Ports") -> Iterable[tuple[str, object, float]]:
        return ()


class Sink:
    kind = "sink"

    def consume(self, port: str, payload: Payload, t: float, ports: "Ports") -> None:
        pass


_REGISTRY: dict[str, Callable[[], object]] = {}
EXTERNAL = "external"


def register_impl(impl_id: str, factory: Callable[[], object] | None = None):
    """Register an implementation under ``impl_id``; usable as a decorator."""

    def deco(f):
        if impl_id == EXTERNAL:
            raise ValueError("'external' is reserved for out-of-process instances")
        _REGISTRY[impl_id] = f
        return f

    return deco(factory) if factory is not None else deco


def lookup_impl(impl_id: str) -> Callable[[], object]:
    try:
        return _REGISTRY[impl_id]
    except KeyError:
        raise StartupError(f"no implementation registered as {impl_id!r}") from None


def registered_impls() -> list[str]:
    return sorted(_REGISTRY)


# --- filters -----------------------------------------------------------------


def rle_compress(data: bytes) -> bytes:
    """Byte-level run-length encoding as (count-1, value) pairs, runs of at most 256.

    Incompressible input doubles in size.
    """
    a = np.frombuffer(data, dtype=np.uint8)
    if a.size == 0:
        return b""
    starts = np.concatenate(([0], np.flatnonzero(a[1:] != a[:-1]) + 1))
    lengths = np.diff(np.append(starts, a.size))
    pairs_per_run = (lengths + 255) // 256
    values = np.repeat(a[starts], pairs_per_run)
    counts = np.full(values.size, 256, dtype=np.int64)
    counts[np.cumsum(pairs_per_run) - 1] = lengths - (pairs_per_run - 1) * 256
    out = np.empty(2 * values.size, dtype=np.uint8)
    out[0::2] = counts - 1
    out[1::2] = values
    return out.tobytes()


def rle_decompress(data: bytes) -> bytes:
    if len(data) % 2:
        raise Malformed("RLE input has odd length")
    a = np.frombuffer(data, dtype=np.uint8)
    return np.repeat(a[1::2], a[0::2].astype(np.int64) + 1).tobytes()


@dataclass(frozen=True)
class FilterInstance:
    spec: FilterSpec

    def __call__(self, p: Payload) -> Payload:
        name = self.spec.name
        if name in ("compress", "decompress"):
            if p.type is not PayloadType.RAW:
                raise TypeMismatch(f"{name} needs raw bytes, got {p.type.name}")
            fn = rle_compress if name == "compress" else rle_decompress
            return Payload.raw(fn(p.elements))
        if name == "affine":
            if p.type is not PayloadType.F64:
                raise TypeMismatch(f"affine needs f64, got {p.type.name}")
            scale, offset = self.spec.args
            return Payload.f64(scale * p.elements + offset)
        raise TypeMismatch(f"unknown filter {name!r}")


def apply_filter_chain(filters: Iterable[FilterSpec | FilterInstance], payload: Payload) -> Payload:
    for f in filters:
        if isinstance(f, FilterSpec):
            f = FilterInstance(f)
        payload = f(payload)
    return payload


# --- timestamps --------------------------------------------------------------


class TimestampChecker:
    """Per in-port monotonicity of received simulation time."""

    def __init__(self):
        self.last: dict[str, float] = {}

    def check(self, port: str, t: float) -> None:
        last = self.last.get(port)
        if last is not None and t < last:
            raise TimestampRegression(port, last, t)
        self.last[port] = t


def check_timestamp(checker: TimestampChecker, port: str, t: float) -> None:
    checker.check(port, t)


# --- ports -------------------------------------------------------------------


class SELPhase(enum.Enum):
    INIT = "Init"
    OBSERVATION_INTERMEDIATE = "ObservationIntermediate"
    SOLVE = "Solve"
    OBSERVATION_FINAL = "ObservationFinal"
    DONE = "Done"


_LEGAL = {
    None: {SELPhase.INIT},
    SELPhase.INIT: {SELPhase.OBSERVATION_INTERMEDIATE},
    SELPhase.OBSERVATION_INTERMEDIATE: {SELPhase.SOLVE, SELPhase.OBSERVATION_FINAL},
    SELPhase.SOLVE: {SELPhase.OBSERVATION_INTERMEDIATE},
    SELPhase.OBSERVATION_FINAL: {SELPhase.DONE, SELPhase.INIT},
    SELPhase.DONE: set(),
}
_SEND_PHASES = {SELPhase.OBSERVATION_INTERMEDIATE, SELPhase.OBSERVATION_FINAL}
_RECEIVE_PHASES = {SELPhase.INIT, SELPhase.SOLVE}


@dataclass
class OutPort:
    conduit: ConduitSpec
    channel: ChannelRef
    filters: tuple[FilterInstance, ...] = ()

    @classmethod
    def for_conduit(cls, conduit: ConduitSpec, channel: ChannelRef) -> "OutPort":
        return cls(conduit, channel, tuple(FilterInstance(f) for f in conduit.filters))


@dataclass
class Ports:
    """Port operations available to one instance's callbacks."""

    name: str
    outputs: dict[str, OutPort] = field(default_factory=dict)
    inputs: dict[str, PortQueue] = field(default_factory=dict)
    params: dict[str, str] = field(default_factory=dict)
    scale: ScaleSpec | None = None
    strict: bool = False
    on_receive: Callable[[str, Message], None] | None = None
    phase: SELPhase | None = None
    timestamps: TimestampChecker = field(default_factory=TimestampChecker)

    def enter(self, phase: SELPhase) -> None:
        if phase not in _LEGAL[self.phase]:
            raise PhaseViolation(f"{self.name}: illegal transition {self.phase} -> {phase}")
        self.phase = phase

    def send(self, port: str, payload, t: float) -> None:
        port_send(self, port, payload, t)

    def receive(self, port: str) -> tuple[Payload, float]:
        return port_receive(self, port)

    def try_receive(self, port: str) -> tuple[Payload, float] | None:
        self._check_receive(port)
        msg = self.inputs[port].try_get()
        return None if msg is None else self._accept(port, msg)

    def receive_any(self) -> tuple[str, Payload, float] | None:
        """Next message from whichever in-port has one; None once all are closed."""
        live = dict(self.inputs)
        while live:
            for port, q in list(live.items()):
                try:
                    msg = q.try_get()
                except QueueClosed:
                    del live[port]
                    continue
                if msg is not None:
                    payload, t = self._accept(port, msg)
                    return port, payload, t
            if live:
                cond = next(iter(live.values())).cond
                with cond:
                    cond.wait_for(lambda: any(q._ready() for q in live.values()))
        return None

    def connected(self, port: str) -> bool:
        return port in self.outputs or port in self.inputs

    def _check_receive(self, port: str) -> None:
        if self.strict and self.phase not in _RECEIVE_PHASES:
            raise PhaseViolation(f"{self.name}: receive on {port!r} during {self.phase.value if self.phase else None}")
        if port not in self.inputs:
            raise UnconnectedPort(f"{self.name}.{port} has no incoming conduit")

    def _accept(self, port: str, msg: Message) -> tuple[Payload, float]:
        self.timestamps.check(port, msg.timestamp)
        if self.on_receive is not None:
            self.on_receive(port, msg)
        return msg.payload, msg.timestamp


def port_send(ports: Ports, out_port: str, payload, t: float) -> None:
    if ports.strict and ports.phase not in _SEND_PHASES:
        raise PhaseViolation(
            f"{ports.name}: send on {out_port!r} during {ports.phase.value if ports.phase else None}"
        )
    out = ports.outputs.get(out_port)
    if out is None:
        raise UnconnectedPort(f"{ports.name}.{out_port} has no outgoing conduit")
    p = apply_filter_chain(out.filters, Payload.of(payload))
    msg = Message(out.conduit.src, out.conduit.dst, float(t), p)
    send(out.channel, msg)


def port_receive(ports: Ports, in_port: str) -> tuple[Payload, float]:
    ports._check_receive(in_port)
    return ports._accept(in_port, ports.inputs[in_port].get())


# --- drivers -----------------------------------------------------------------


def sel_step_count(dt: float, total_time: float) -> int:
    """Solve steps per pass: ceil(T/dt), forgiving float noise at exact multiples."""
    ratio = total_time / dt
    nearest = round(ratio)
    if abs(ratio - nearest) <= 1e-9 * max(1.0, nearest):
        return max(1, int(nearest))
    return max(1, math.ceil(ratio))


@dataclass
class Completion:
    name: str
    kind: str
    passes: int = 0
    solve_steps: int = 0
    activations: int = 0
    messages: int = 0


def _strict_for(spec: InstanceSpec, impl) -> bool:
    flag = spec.params.get("strict")
    if flag is not None:
        return flag.strip().lower() not in ("0", "false", "no", "off")
    return bool(getattr(impl, "strict", True))


def _drive_submodel(spec: InstanceSpec, impl: Submodel, ports: Ports, done: Completion) -> None:
    if spec.scale is None:
        raise StartupError(f"submodel {spec.name} has no scale")
    dt, total = spec.scale.dt, spec.scale.total_time
    steps = sel_step_count(dt, total)
    restart_name = spec.params.get("restart_port", getattr(impl, "restart_port", "restart"))
    restart_q = ports.inputs.get(restart_name)
    ports.strict = _strict_for(spec, impl)
    ports.phase = None
    while True:
        consumed_before = restart_q.received if restart_q is not None else 0
        ports.enter(SELPhase.INIT)
        impl.init(0.0, ports)
        for k in range(steps):
            t = k * dt
            ports.enter(SELPhase.OBSERVATION_INTERMEDIATE)
            impl.intermediate_observation(t, ports)
            ports.enter(SELPhase.SOLVE)
            impl.solve_step(t, dt, ports)
            done.solve_steps += 1
        ports.enter(SELPhase.OBSERVATION_INTERMEDIATE)
        ports.enter(SELPhase.OBSERVATION_FINAL)
        impl.final_observation(steps * dt, ports)
        done.passes += 1
        if done.passes > 1 and restart_q.received == consumed_before:
            raise CoupletError(f"{spec.name}: restart input on {restart_name!r} was never consumed")
        if restart_q is None or not restart_q.wait_pending():
            break
    ports.enter(SELPhase.DONE)


def _drive_mapper(impl: Mapper, ports: Ports, done: Completion) -> None:
    in_ports = list(ports.inputs)
    if not in_ports:
        return
    while True:
        inputs = {}
        try:
            for p in in_ports:
                inputs[p] = ports.receive(p)
        except QueueClosed:
            return
        impl.activate(inputs, ports)
        done.activations += 1


def _drive_source(impl: Source, ports: Ports, done: Completion) -> None:
    produced = impl.produce(ports)
    for port, payload, t in produced or ():
        ports.send(port, payload, t)
        done.messages += 1


def _drive_sink(impl: Sink, ports: Ports, done: Completion) -> None:
    while True:
        item = ports.receive_any()
        if item is None:
            return
        impl.consume(*item, ports)
        done.messages += 1


def run_instance(spec: InstanceSpec, impl, ports: Ports) -> Completion:
    """Drive one instance to completion in the calling thread."""
    impl_kind = getattr(impl, "kind", None)
    if impl_kind != spec.kind:
        raise StartupError(f"{spec.name}: implementation kind {impl_kind!r} does not match {spec.kind!r}")
    ports.name = spec.name
    ports.params = spec.params
    ports.scale = spec.scale
    done = Completion(spec.name, spec.kind)
    if spec.kind == "submodel":
        _drive_submodel(spec, impl, ports, done)
    else:
        ports.strict = False
        if spec.kind == "mapper":
            _drive_mapper(impl, ports, done)
        elif spec.kind == "source":
            _drive_source(impl, ports, done)
        else:
            _drive_sink(impl, ports, done)
    return done


def wire_in_process(topology, instances: Iterable[str] | None = None) -> dict[str, Ports]:
    """Build connected :class:`Ports` for instances that all live in this process."""
    names = list(instances) if instances is not None else topology.names()
    ports = {n: Ports(name=n) for n in names}
    conds = {n: threading.Condition() for n in names}
    for c in topology.conduits:
        if c.src.instance not in ports or c.dst.instance not in ports:
            raise ValueError(f"conduit {c} leaves the wired set")
        q = PortQueue(str(c.dst), cond=conds[c.dst.instance])
        ports[c.dst.instance].inputs[c.dst.port] = q
        ch = ChannelRef("in_process", queue=q, zero_copy=c.zero_copy)
        ports[c.src.instance].outputs[c.src.port] = OutPort.for_conduit(c, ch)
    return ports


def close_outputs(ports: Ports) -> None:
    for out in ports.outputs.values():
        if out.channel.kind == "in_process":
            out.channel.queue.close_producer()


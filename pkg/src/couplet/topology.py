"""In-memory model of a coupled multiscale topology and its validation rules.

A topology is a set of instances (submodels, mappers, sources, sinks) joined
by one-way conduits from an out-port to an in-port. Ports are not declared
separately; they exist because a conduit mentions them.
"""

from __future__ import annotations

import enum
import re
from dataclasses import dataclass, field

from .errors import InvalidTopology

TOKEN_RE = re.compile(r"[A-Za-z_][A-Za-z0-9_]*\Z")
IMPL_RE = re.compile(r"[A-Za-z_][A-Za-z0-9_]*(\.[A-Za-z_][A-Za-z0-9_]*)*\Z")

KINDS = ("submodel", "mapper", "source", "sink")
FILTER_ARITY = {"compress": 0, "decompress": 0, "affine": 2}


def is_token(text: str) -> bool:
    return bool(TOKEN_RE.match(text))


@dataclass(frozen=True, order=True)
class Endpoint:
    instance: str
    port: str

    def __str__(self) -> str:
        return f"{self.instance}.{self.port}"


@dataclass(frozen=True)
class ScaleSpec:
    dt: float
    total_time: float


@dataclass
class InstanceSpec:
    name: str
    kind: str
    impl_id: str
    params: dict[str, str] = field(default_factory=dict)
    scale: ScaleSpec | None = None


@dataclass(frozen=True)
class FilterSpec:
    name: str
    args: tuple[float, ...] = ()

    def __str__(self) -> str:
        if self.name == "affine":
            return "affine(" + ",".join(_fmt_number(a) for a in self.args) + ")"
        return self.name


@dataclass(frozen=True)
class ConduitSpec:
    src: Endpoint
    dst: Endpoint
    filters: tuple[FilterSpec, ...] = ()
    # Skip the copy on in-process delivery. Only safe when the sender never
    # touches the array again; not expressible in the config format.
    zero_copy: bool = False

    def __str__(self) -> str:
        return f"{self.src} -> {self.dst}"


@dataclass
class Topology:
    instances: list[InstanceSpec] = field(default_factory=list)
    conduits: list[ConduitSpec] = field(default_factory=list)

    def instance(self, name: str) -> InstanceSpec:
        for inst in self.instances:
            if inst.name == name:
                return inst
        raise KeyError(name)

    def names(self) -> list[str]:
        return [inst.name for inst in self.instances]

    def in_ports(self, name: str) -> list[str]:
        return [c.dst.port for c in self.conduits if c.dst.instance == name]

    def out_ports(self, name: str) -> list[str]:
        return [c.src.port for c in self.conduits if c.src.instance == name]

    def conduits_from(self, name: str) -> list[ConduitSpec]:
        return [c for c in self.conduits if c.src.instance == name]

    def conduits_to(self, name: str) -> list[ConduitSpec]:
        return [c for c in self.conduits if c.dst.instance == name]


@dataclass(frozen=True)
class Violation:
    rule: str
    element: str
    detail: str = ""

    def __str__(self) -> str:
        tail = f": {self.detail}" if self.detail else ""
        return f"{self.rule} [{self.element}]{tail}"


class Coupling(str, enum.Enum):
    ACYCLIC = "acyclic"
    CYCLIC = "cyclic"


def _fmt_number(x: float) -> str:
    # shortest repr that round-trips; drop a trailing ".0" for integers
    text = repr(float(x))
    return text[:-2] if text.endswith(".0") else text


def _check_instance(inst: InstanceSpec, out: list[Violation]) -> None:
    if not is_token(inst.name):
        out.append(Violation("BadName", inst.name, "instance name is not a token"))
    if inst.kind not in KINDS:
        out.append(Violation("BadKind", inst.name, f"kind {inst.kind!r}"))
    if not IMPL_RE.match(inst.impl_id):
        out.append(Violation("BadImplId", inst.name, f"impl {inst.impl_id!r}"))
    for key in inst.params:
        if not is_token(key):
            out.append(Violation("BadParamKey", inst.name, f"key {key!r}"))
    if inst.kind == "submodel" and inst.scale is None:
        out.append(Violation("MissingScale", inst.name))
    if inst.scale is not None:
        dt, total = inst.scale.dt, inst.scale.total_time
        if not (dt > 0 and total > 0):
            out.append(Violation("BadScale", inst.name, "dt and T must be positive"))
        elif total < dt:
            out.append(Violation("BadScale", inst.name, "T must be at least dt"))


def _check_conduit(c: ConduitSpec, kinds: dict[str, str], out: list[Violation]) -> None:
    label = str(c)
    for ep in (c.src, c.dst):
        if not is_token(ep.port):
            out.append(Violation("BadName", label, f"port {ep.port!r} is not a token"))
        if ep.instance not in kinds:
            out.append(Violation("UnknownInstance", label, ep.instance))
    if c.src == c.dst or c.src.instance == c.dst.instance:
        out.append(Violation("SelfConduit", label))
    if kinds.get(c.dst.instance) == "source":
        out.append(Violation("SourceInPort", label, "sources accept no input"))
    if kinds.get(c.src.instance) == "sink":
        out.append(Violation("SinkOutPort", label, "sinks produce no output"))
    for f in c.filters:
        arity = FILTER_ARITY.get(f.name)
        if arity is None:
            out.append(Violation("BadFilter", label, f"unknown filter {f.name!r}"))
        elif len(f.args) != arity:
            out.append(Violation("BadFilter", label, f"{f.name} takes {arity} args"))


def validate_topology(t: Topology) -> list[Violation]:
    """Return every rule violation in ``t``, in declaration order.

    An empty list means the topology is valid. Instances are checked first,
    then conduits, each in the order they were declared.
    """
    out: list[Violation] = []
    kinds: dict[str, str] = {}
    for inst in t.instances:
        if inst.name in kinds:
            out.append(Violation("DuplicateInstance", inst.name))
        else:
            kinds[inst.name] = inst.kind
        _check_instance(inst, out)

    seen_in: set[Endpoint] = set()
    seen_out: set[Endpoint] = set()
    for c in t.conduits:
        _check_conduit(c, kinds, out)
        if c.dst in seen_in:
            out.append(Violation("DuplicateInPort", str(c), str(c.dst)))
        seen_in.add(c.dst)
        if c.src in seen_out:
            out.append(Violation("DuplicateOutPort", str(c), str(c.src)))
        seen_out.add(c.src)
    return out


def instance_graph(t: Topology) -> dict[str, set[str]]:
    graph: dict[str, set[str]] = {inst.name: set() for inst in t.instances}
    for c in t.conduits:
        graph.setdefault(c.src.instance, set()).add(c.dst.instance)
        graph.setdefault(c.dst.instance, set())
    return graph


def classify_coupling(t: Topology) -> Coupling:
    """Cyclic iff the instance graph (ports collapsed) has a directed cycle."""
    violations = validate_topology(t)
    if violations:
        raise InvalidTopology(violations)
    graph = instance_graph(t)
    white, grey, black = 0, 1, 2
    color = dict.fromkeys(graph, white)
    for root in graph:
        if color[root] != white:
            continue
        color[root] = grey
        stack = [(root, iter(sorted(graph[root])))]
        while stack:
            node, children = stack[-1]
            child = next(children, None)
            if child is None:
                color[node] = black
                stack.pop()
            elif color[child] == grey:
                return Coupling.CYCLIC
            elif color[child] == white:
                color[child] = grey
                stack.append((child, iter(sorted(graph[child]))))
    return Coupling.ACYCLIC

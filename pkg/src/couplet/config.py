"""Declarative coupling configuration: one directive per line.

    instance <name> <kind>:<impl-id>
    scale <name> dt=<duration> T=<duration>
    param <name>.<key> <value to end of line>
    conduit <name>.<port> -> <name>.<port> [<filter>,...]

Durations are ``<decimal> <unit>`` with units s, ms, minute, hour, day.
``#`` starts a comment; blank lines are ignored.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field

from .errors import (
    BadDuration,
    BadFilter,
    ConfigSyntaxError,
    DuplicateInstance,
    InvalidTopology,
    UnknownInstance,
)
from .topology import (
    FILTER_ARITY,
    IMPL_RE,
    KINDS,
    ConduitSpec,
    Endpoint,
    FilterSpec,
    InstanceSpec,
    ScaleSpec,
    Topology,
    _fmt_number,
    is_token,
    validate_topology,
)

UNITS = {
    "s": 1.0,
    "second": 1.0,
    "seconds": 1.0,
    "ms": 0.001,
    "minute": 60.0,
    "minutes": 60.0,
    "hour": 3600.0,
    "hours": 3600.0,
    "day": 86400.0,
    "days": 86400.0,
}

NUMBER_RE = re.compile(r"[+-]?(?:\d+(?:\.\d*)?|\.\d+)(?:[eE][+-]?\d+)?\Z")
TOKEN_SPLIT = re.compile(r"[^ \t]+")
FILTER_RE = re.compile(r"[ \t]*([A-Za-z_][A-Za-z0-9_]*)[ \t]*(?:\(([^()]*)\))?[ \t]*\Z")


@dataclass
class ConfigDocument:
    topology: Topology = field(default_factory=Topology)
    raw_params: list[tuple[str, str, str]] = field(default_factory=list)

    @classmethod
    def from_topology(cls, topology: Topology) -> "ConfigDocument":
        raw = [(i.name, k, v) for i in topology.instances for k, v in i.params.items()]
        return cls(topology=topology, raw_params=raw)


def parse_number(text: str) -> float:
    if not NUMBER_RE.match(text):
        raise ValueError(text)
    value = float(text)
    if not math.isfinite(value):
        raise ValueError(text)
    return value


def parse_duration(text: str) -> float:
    """Parse ``"<decimal> <unit>"`` into seconds."""
    parts = text.split()
    if len(parts) != 2 or parts[1] not in UNITS:
        raise BadDuration(text)
    try:
        value = parse_number(parts[0]) * UNITS[parts[1]]
    except ValueError:
        raise BadDuration(text) from None
    if not (value > 0 and math.isfinite(value)):
        raise BadDuration(text)
    return value


def format_duration(seconds: float) -> str:
    return f"{_fmt_number(seconds)} s"


class _Line:
    """Token cursor over one directive line; columns are 1-based."""

    def __init__(self, lineno: int, text: str):
        self.lineno = lineno
        self.text = text
        self.tokens = [(m.group(), m.start() + 1) for m in TOKEN_SPLIT.finditer(text)]
        self.pos = 0

    def fail(self, expected: str, col: int | None = None) -> ConfigSyntaxError:
        if col is None:
            col = self.tokens[self.pos][1] if self.pos < len(self.tokens) else len(self.text) + 1
        return ConfigSyntaxError(self.lineno, col, expected)

    def next(self, expected: str) -> tuple[str, int]:
        if self.pos >= len(self.tokens):
            raise self.fail(expected)
        tok = self.tokens[self.pos]
        self.pos += 1
        return tok

    def rest(self) -> tuple[str, int]:
        """Everything from the current token to end of line, stripped."""
        if self.pos >= len(self.tokens):
            return "", len(self.text) + 1
        col = self.tokens[self.pos][1]
        self.pos = len(self.tokens)
        return self.text[col - 1 :].rstrip(" \t"), col

    def done(self) -> None:
        if self.pos < len(self.tokens):
            raise self.fail("end of line")


def _name(line: _Line, what: str) -> str:
    tok, col = line.next(what)
    if not is_token(tok):
        raise line.fail(what, col)
    return tok


def _endpoint(line: _Line) -> Endpoint:
    tok, col = line.next("<instance>.<port>")
    inst, dot, port = tok.partition(".")
    if not dot or not is_token(inst) or not is_token(port):
        raise line.fail("<instance>.<port>", col)
    return Endpoint(inst, port)


def _filters(line: _Line, text: str, col: int) -> tuple[FilterSpec, ...]:
    if not (text.startswith("[") and text.endswith("]")):
        raise line.fail("[<filter>,...]", col)
    body = text[1:-1]
    if not body.strip():
        return ()
    # split on commas outside parentheses
    items, depth, start = [], 0, 0
    for i, ch in enumerate(body):
        if ch == "(":
            depth += 1
        elif ch == ")":
            depth -= 1
        elif ch == "," and depth == 0:
            items.append(body[start:i])
            start = i + 1
    items.append(body[start:])
    out = []
    for item in items:
        m = FILTER_RE.match(item)
        if not m:
            raise line.fail("filter", col)
        name, argtext = m.group(1), m.group(2)
        if name not in FILTER_ARITY:
            raise BadFilter(name, line.lineno)
        args: tuple[float, ...] = ()
        if argtext is not None and argtext.strip():
            try:
                args = tuple(parse_number(a.strip()) for a in argtext.split(","))
            except ValueError:
                raise BadFilter(name, line.lineno) from None
        if len(args) != FILTER_ARITY[name]:
            raise BadFilter(name, line.lineno)
        out.append(FilterSpec(name, args))
    return tuple(out)


def _parse_scale(line: _Line) -> tuple[str, ScaleSpec]:
    name = _name(line, "instance name")
    values: dict[str, float] = {}
    while line.pos < len(line.tokens):
        tok, col = line.next("dt=<duration> or T=<duration>")
        key, eq, num = tok.partition("=")
        if not eq or key not in ("dt", "T") or key in values:
            raise line.fail("dt=<duration> or T=<duration>", col)
        unit, _ = line.next("duration unit")
        values[key] = parse_duration(f"{num} {unit}")
    if set(values) != {"dt", "T"}:
        raise line.fail("dt=<duration> T=<duration>")
    return name, ScaleSpec(dt=values["dt"], total_time=values["T"])


def _decode(data: bytes) -> str:
    try:
        return data.decode("utf-8")
    except UnicodeDecodeError as exc:
        before = data[: exc.start]
        lineno = before.count(b"\n") + 1
        col = exc.start - (before.rfind(b"\n") + 1) + 1
        raise ConfigSyntaxError(lineno, col, "valid UTF-8") from None


def parse_config(text: str | bytes) -> ConfigDocument:
    """Parse configuration text into a validated :class:`ConfigDocument`.

    Raises a :class:`~couplet.errors.ConfigError` subclass on malformed
    input and :class:`~couplet.errors.InvalidTopology` when the lines parse
    but the topology breaks a structural rule.
    """
    if isinstance(text, (bytes, bytearray)):
        text = _decode(bytes(text))

    instances: dict[str, InstanceSpec] = {}
    scales: list[tuple[int, str, ScaleSpec]] = []
    params: list[tuple[int, str, str, str]] = []
    conduits: list[tuple[int, ConduitSpec]] = []

    for lineno, raw in enumerate(text.split("\n"), start=1):
        raw = raw.rstrip("\r")
        hash_at = raw.find("#")
        if hash_at >= 0:
            raw = raw[:hash_at]
        line = _Line(lineno, raw)
        if not line.tokens:
            continue
        directive, col = line.next("directive")
        if directive == "instance":
            name = _name(line, "instance name")
            tok, tcol = line.next("<kind>:<impl-id>")
            kind, colon, impl = tok.partition(":")
            if not colon or kind not in KINDS or not IMPL_RE.match(impl):
                raise line.fail("<kind>:<impl-id>", tcol)
            line.done()
            if name in instances:
                raise DuplicateInstance(name, lineno)
            instances[name] = InstanceSpec(name=name, kind=kind, impl_id=impl)
        elif directive == "scale":
            name, scale = _parse_scale(line)
            scales.append((lineno, name, scale))
        elif directive == "param":
            tok, tcol = line.next("<instance>.<key>")
            inst, dot, key = tok.partition(".")
            if not dot or not is_token(inst) or not is_token(key):
                raise line.fail("<instance>.<key>", tcol)
            value, _ = line.rest()
            if not value:
                raise line.fail("parameter value")
            params.append((lineno, inst, key, value))
        elif directive == "conduit":
            src = _endpoint(line)
            arrow, acol = line.next("->")
            if arrow != "->":
                raise line.fail("->", acol)
            dst = _endpoint(line)
            ftext, fcol = line.rest()
            filters = _filters(line, ftext, fcol) if ftext else ()
            conduits.append((lineno, ConduitSpec(src, dst, filters)))
        else:
            raise line.fail("instance, scale, param or conduit", col)

    seen_scale: set[str] = set()
    for lineno, name, scale in scales:
        if name not in instances:
            raise UnknownInstance(name, lineno)
        if name in seen_scale:
            raise ConfigSyntaxError(lineno, 1, f"a single scale directive for {name}")
        seen_scale.add(name)
        instances[name].scale = scale
    raw_params = []
    for lineno, inst, key, value in params:
        if inst not in instances:
            raise UnknownInstance(inst, lineno)
        instances[inst].params[key] = value
        raw_params.append((inst, key, value))
    for lineno, c in conduits:
        for ep in (c.src, c.dst):
            if ep.instance not in instances:
                raise UnknownInstance(ep.instance, lineno)

    topology = Topology(instances=list(instances.values()), conduits=[c for _, c in conduits])
    violations = validate_topology(topology)
    if violations:
        raise InvalidTopology(violations)
    return ConfigDocument(topology=topology, raw_params=raw_params)


def render_config(doc: ConfigDocument) -> str:
    """Render the canonical text form; durations are written in seconds."""
    t = doc.topology
    lines = [f"instance {i.name} {i.kind}:{i.impl_id}" for i in t.instances]
    for i in t.instances:
        if i.scale is not None:
            lines.append(
                f"scale {i.name} dt={format_duration(i.scale.dt)} T={format_duration(i.scale.total_time)}"
            )
    raw = doc.raw_params
    if not raw:
        raw = [(i.name, k, v) for i in t.instances for k, v in i.params.items()]
    lines.extend(f"param {inst}.{key} {value}" for inst, key, value in raw)
    for c in t.conduits:
        text = f"conduit {c.src} -> {c.dst}"
        if c.filters:
            text += " [" + ",".join(str(f) for f in c.filters) + "]"
        lines.append(text)
    return "".join(line + "\n" for line in lines)


def load_config(path) -> ConfigDocument:
    with open(path, "rb") as fh:
        return parse_config(fh.read())

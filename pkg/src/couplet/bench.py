"""Measurement harness: ping-pong speed tests and startup-overhead regression."""

from __future__ import annotations

import csv
import ctypes
import io
import statistics
import time
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .codec import Payload
from .config import ConfigDocument
from .errors import DegenerateInput, RankDeficient
from .kernel import Mapper, Submodel, register_impl
from .relay import PeerSpec, Relay, RelayConfig
from .runtime import ManagerEndpoint, RunPlan, run_simulation
from .topology import ConduitSpec, Endpoint, InstanceSpec, ScaleSpec, Topology
from .transport import Location, PortRange

KIB = 1024
MIB = 1024 * KIB
DEFAULT_SIZES = [0] + [(1 << i) * KIB for i in range(17)]
DESK_MAX_SIZE = 16 * MIB
TRANSPORTS = ("in_process", "socket", "relay")


# --- fits --------------------------------------------------------------------


@dataclass(frozen=True)
class LineFit:
    slope: float
    intercept: float
    r2: float


def fit_line(points: Iterable[tuple[float, float]]) -> LineFit:
    """Ordinary least squares ``y = slope*x + intercept``."""
    pts = np.asarray(list(points), dtype=float).reshape(-1, 2)
    x, y = pts[:, 0], pts[:, 1]
    if len(np.unique(x)) < 2:
        raise DegenerateInput("need at least two distinct x values")
    # centring keeps the normal equations well conditioned
    xm, ym = x.mean(), y.mean()
    dx, dy = x - xm, y - ym
    slope = float(np.dot(dx, dy) / np.dot(dx, dx))
    intercept = float(ym - slope * xm)
    ss_tot = float(np.dot(dy, dy))
    resid = y - (slope * x + intercept)
    ss_res = float(np.dot(resid, resid))
    r2 = 1.0 if ss_tot == 0 else min(1.0, max(0.0, 1.0 - ss_res / ss_tot))
    return LineFit(slope, intercept, r2)


@dataclass(frozen=True)
class OverheadFit:
    a: float
    b: float
    c: float
    min_time: float

    def predict(self, n: float, m: float) -> float:
        return self.a + self.b * n + self.c * m


def fit_overhead(samples: Iterable[tuple[float, float, float]]) -> OverheadFit:
    """Least-squares plane ``T = a + b*n + c*m`` over ``(n, m, T)`` samples."""
    s = np.asarray(list(samples), dtype=float).reshape(-1, 3)
    design = np.column_stack([np.ones(len(s)), s[:, 0], s[:, 1]])
    if len(s) < 3 or np.linalg.matrix_rank(design) < 3:
        raise RankDeficient("samples do not determine a plane in (n, m)")
    (a, b, c), *_ = np.linalg.lstsq(design, s[:, 2], rcond=None)
    return OverheadFit(float(a), float(b), float(c), float(s[:, 2].min()))


# --- ping-pong ---------------------------------------------------------------


_M_TRIM_THRESHOLD, _M_TOP_PAD, _M_MMAP_THRESHOLD = -1, -2, -3


def tune_allocator() -> bool:
    """Keep freed large buffers in the glibc heap for the rest of the process.

    By default glibc returns multi-megabyte chunks to the OS on free, so every
    fresh 16 MiB payload pays for page faults again, and whether it does varies
    with thread arena placement. That makes the top sizes of a sweep bimodal.
    Returns False where ``mallopt`` is unavailable (non-glibc platforms).
    """
    try:
        mallopt = ctypes.CDLL(None).mallopt
    except (OSError, AttributeError):
        return False
    ok = mallopt(_M_TRIM_THRESHOLD, 1 << 30)
    ok &= mallopt(_M_TOP_PAD, 64 * MIB)
    ok &= mallopt(_M_MMAP_THRESHOLD, 32 * MIB)  # glibc's ceiling for this knob
    return bool(ok)


@register_impl("bench.ping")
class Ping(Submodel):
    """One round trip per step: send in observation, wait for the echo in solve.

    Step ``k`` uses ``sizes[k // per_size]``; the first ``warmup`` trips of
    every size are not timed.
    """

    def __init__(self, sizes: Sequence[int] = (), round_trips: int = 100, warmup: int = 1):
        self.sizes = list(sizes)
        self.round_trips = round_trips
        self.warmup = warmup
        self.result: dict[int, list[float]] = {}
        self.mismatches = 0

    def init(self, t0, ports):
        self._buffers = {s: np.random.default_rng(s).integers(0, 256, s, dtype=np.uint8).tobytes() for s in set(self.sizes)}

    def _slot(self, t):
        k = int(round(t))
        per = self.round_trips + self.warmup
        return self.sizes[k // per], k % per >= self.warmup

    def intermediate_observation(self, t, ports):
        size, _ = self._slot(t)
        self._started = time.perf_counter()
        ports.send("ping", Payload.raw(self._buffers[size]), t)

    def solve_step(self, t, dt, ports):
        payload, _ = ports.receive("pong")
        elapsed = time.perf_counter() - self._started
        size, timed = self._slot(t)
        if timed:
            self.result.setdefault(size, []).append(elapsed)
            if payload.elements != self._buffers[size]:
                self.mismatches += 1


@register_impl("bench.echo")
class Echo(Mapper):
    def activate(self, inputs, ports):
        payload, t = inputs["ping"]
        ports.send("pong", payload, t)


@dataclass
class SpeedReport:
    transport: str
    sizes: list[int]
    mean: dict[int, float]  # one-way seconds
    minimum: dict[int, float]
    latency: float
    throughput: float  # bytes per second, from the size fit
    fit: LineFit | None
    mismatches: int = 0

    def rows(self) -> list[tuple[str, int, float, float]]:
        return [(self.transport, s, self.mean[s], self.minimum[s]) for s in self.sizes]


def pingpong_topology(n_steps: int) -> Topology:
    scale = ScaleSpec(1.0, float(n_steps))
    return Topology(
        instances=[
            InstanceSpec("ping", "submodel", "bench.ping", {}, scale),
            InstanceSpec("echo", "mapper", "bench.echo", {}, None),
        ],
        conduits=[
            ConduitSpec(Endpoint("ping", "ping"), Endpoint("echo", "ping")),
            ConduitSpec(Endpoint("echo", "pong"), Endpoint("ping", "pong")),
        ],
    )


class _RelayPair:
    """Two relays on loopback, one per side of the ping-pong."""

    def __init__(self, base_port: int = 23000):
        self.ranges = (PortRange(base_port, base_port + 49), PortRange(base_port + 50, base_port + 99))
        any_port = Location("127.0.0.1", 0)
        self.a = Relay(RelayConfig(self.ranges[0], name="a", listen=any_port))
        self.b = Relay(RelayConfig(self.ranges[1], name="b", listen=any_port))
        self.a.add_peer(PeerSpec("b", self.b.address, self.ranges[1]))
        self.b.add_peer(PeerSpec("a", self.a.address, self.ranges[0]))
        self.a.start()
        self.b.start()

    def endpoints(self) -> dict[str, ManagerEndpoint]:
        return {
            "main": ManagerEndpoint(port_range=self.ranges[0], relay=self.a.address),
            "peer": ManagerEndpoint(port_range=self.ranges[1], relay=self.b.address),
        }

    def close(self) -> None:
        self.a.stop()
        self.b.stop()


def run_pingpong(
    transport: str = "in_process",
    sizes: Sequence[int] | None = None,
    round_trips: int = 100,
    warmup: int = 1,
    relay_base_port: int = 23000,
    ping_cls: type[Ping] = Ping,
) -> SpeedReport:
    """Time ``round_trips`` round trips per message size between two instances.

    One-way time is half the round-trip time. Latency is the smallest one-way
    time seen; throughput is the inverse slope of mean time against size.
    ``ping_cls`` may name an instrumented :class:`Ping` subclass.
    """
    if transport not in TRANSPORTS:
        raise ValueError(f"transport must be one of {TRANSPORTS}")
    sizes = list(DEFAULT_SIZES if sizes is None else sizes)
    if round_trips < 1 or not sizes:
        raise ValueError("need at least one size and one round trip")
    ping = ping_cls(sizes, round_trips, warmup)
    steps = len(sizes) * (round_trips + warmup)
    doc = ConfigDocument.from_topology(pingpong_topology(steps))
    relays = None
    placement, endpoints = {}, {}
    if transport != "in_process":
        placement = {"echo": "peer"}
    if transport == "relay":
        relays = _RelayPair(relay_base_port)
        endpoints = relays.endpoints()
    try:
        report = run_simulation(RunPlan(doc, placement, endpoints), impls={"ping": ping})
    finally:
        if relays is not None:
            relays.close()
    if not report.ok:
        raise RuntimeError(f"ping-pong run failed: {report.abort_reason or report.errors}")
    mean = {s: statistics.fmean(ping.result[s]) / 2 for s in sizes}
    minimum = {s: min(ping.result[s]) / 2 for s in sizes}
    fit = fit_line((s, mean[s]) for s in sizes) if len(set(sizes)) >= 2 else None
    throughput = 1.0 / fit.slope if fit is not None and fit.slope > 0 else float("inf")
    return SpeedReport(transport, sizes, mean, minimum, min(minimum.values()), throughput, fit, ping.mismatches)


# --- overhead ----------------------------------------------------------------


@register_impl("bench.overhead")
class OverheadModel(Submodel):
    """Sends one empty message on every out-port, then reads every in-port."""

    def intermediate_observation(self, t, ports):
        for port in ports.outputs:
            ports.send(port, Payload.raw(b""), t)

    def solve_step(self, t, dt, ports):
        for port in ports.inputs:
            ports.receive(port)


def overhead_conduit_counts(n: int, m: int) -> list[int]:
    """Conduits leaving each of ``n`` submodels when ``m`` are spread evenly."""
    if n < 1 or m < 0:
        raise ValueError("need n >= 1 and m >= 0")
    if n == 1 and m:
        raise ValueError("a single submodel cannot have conduits")
    return [m // n + (1 if i < m % n else 0) for i in range(n)]


def generate_overhead_topology(n: int, m: int) -> Topology:
    """``n`` one-step submodels joined by ``m`` conduits.

    Submodel ``i`` connects to the submodels after it, wrapping around to
    the first and never to itself.
    """
    counts = overhead_conduit_counts(n, m)
    scale = ScaleSpec(1.0, 1.0)
    instances = [InstanceSpec(f"s{i}", "submodel", "bench.overhead", {}, scale) for i in range(n)]
    conduits = []
    for i, k in enumerate(counts):
        for j in range(k):
            dst = (i + 1 + j % (n - 1)) % n
            conduits.append(ConduitSpec(Endpoint(f"s{i}", f"o{j}"), Endpoint(f"s{dst}", f"i{i}_{j}")))
    return Topology(instances=instances, conduits=conduits)


@dataclass
class OverheadResult:
    fit: OverheadFit | None
    samples: list[tuple[int, int, float]] = field(default_factory=list)

    def rows(self) -> list[tuple[int, int, float]]:
        return list(self.samples)


def time_overhead_run(n: int, m: int) -> float:
    doc = ConfigDocument.from_topology(generate_overhead_topology(n, m))
    t0 = time.perf_counter()
    report = run_simulation(RunPlan(doc))
    elapsed = time.perf_counter() - t0
    if not report.ok:
        raise RuntimeError(f"overhead run n={n} m={m} failed: {report.abort_reason}")
    return elapsed


def run_overhead_experiment(
    n_values: Sequence[int], m_values: Sequence[int], repeats: int = 3
) -> OverheadResult:
    """Time every valid (n, m) pair, median of ``repeats``, then fit the plane.

    Pairs a single submodel cannot realise (n=1 with m>0) are skipped. The fit
    is omitted when the samples do not span a plane.
    """
    samples = []
    for n in n_values:
        for m in m_values:
            if n < 1 or (n == 1 and m):
                continue
            times = [time_overhead_run(n, m) for _ in range(max(1, repeats))]
            samples.append((n, m, statistics.median(times)))
    try:
        fit = fit_overhead(samples)
    except RankDeficient:
        fit = None
    return OverheadResult(fit, samples)


# --- output ------------------------------------------------------------------

SPEED_COLUMNS = ("transport", "size_bytes", "mean_s", "min_s")
OVERHEAD_COLUMNS = ("n", "m", "T_s")


def to_csv(columns: Sequence[str], rows: Iterable[Sequence]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([f"{v:.9g}" if isinstance(v, float) else v for v in row])
    return buf.getvalue()


def format_table(columns: Sequence[str], rows: Iterable[Sequence]) -> str:
    cells = [list(columns)] + [[f"{v:.6g}" if isinstance(v, float) else str(v) for v in r] for r in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(columns))]
    lines = ["  ".join(c.rjust(w) for c, w in zip(r, widths)) for r in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"

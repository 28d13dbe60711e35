"""1-D diffusion canal, run whole or as two coupled halves.

The stencil ``c' = c + k*(l + r - 2c)`` is applied elementwise in the same
order in both variants, so the split run reproduces the monolithic field bit
for bit. The halves swap one edge value per iteration.
"""

from __future__ import annotations

import math
import statistics
import time
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .codec import Payload
from .config import ConfigDocument
from .kernel import Submodel, register_impl
from .runtime import RunPlan, run_simulation
from .topology import ConduitSpec, Endpoint, InstanceSpec, ScaleSpec, Topology

DEFAULT_N = tuple(0.5 * i for i in range(1, 9))


@dataclass(frozen=True)
class CanalSpec:
    length_m: float = 2500.0
    points_per_metre: float = 4.0
    iterations: int = 100
    diffusion_coeff: float = 0.25
    initial: str = "gaussian"  # or "impulse"

    @property
    def cells(self) -> int:
        return int(round(self.length_m * self.points_per_metre))

    @property
    def dx(self) -> float:
        return 1.0 / self.points_per_metre

    def check(self) -> None:
        n = self.cells
        if n < 4 or n % 2:
            raise ValueError(f"grid of {n} cells must be even and at least 4")
        if not 0 < self.diffusion_coeff <= 0.5:
            raise ValueError("diffusion_coeff must lie in (0, 0.5]")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.initial not in ("gaussian", "impulse"):
            raise ValueError(f"unknown initial field {self.initial!r}")

    def initial_field(self) -> np.ndarray:
        n = self.cells
        if self.initial == "impulse":
            f = np.zeros(n)
            f[n // 2] = 1.0
            return f
        x = (np.arange(n) + 0.5) / n
        return np.exp(-(((x - 0.4) / 0.1) ** 2))


@dataclass
class SectionState:
    cells: np.ndarray
    left_halo: float = 0.0
    right_halo: float = 0.0


def step_section(s: SectionState, k: float) -> SectionState:
    c = s.cells
    left = np.empty_like(c)
    right = np.empty_like(c)
    left[0] = s.left_halo
    left[1:] = c[:-1]
    right[-1] = s.right_halo
    right[:-1] = c[1:]
    return SectionState(c + k * (left + right - 2.0 * c), s.left_halo, s.right_halo)


def run_monolithic(spec: CanalSpec) -> tuple[np.ndarray, float]:
    """Whole-grid loop with zero halos; returns the field and the loop time."""
    spec.check()
    s = SectionState(spec.initial_field())
    t0 = time.perf_counter()
    for _ in range(spec.iterations):
        s = step_section(s, spec.diffusion_coeff)
    return s.cells, time.perf_counter() - t0


@dataclass
class PhaseTimers:
    compute: float = 0.0
    send: float = 0.0
    receive: float = 0.0
    loop: float = 0.0


@register_impl("canal.section")
class Section(Submodel):
    """One half of the canal; param ``side`` is ``left`` or ``right``.

    The initial field is rebuilt from the canal params so both halves agree
    with the monolithic run without shipping the grid.
    """

    def init(self, t0, ports):
        p = ports.params
        spec = CanalSpec(
            length_m=float(p["length_m"]),
            points_per_metre=float(p["points_per_metre"]),
            iterations=int(p["iterations"]),
            diffusion_coeff=float(p["diffusion_coeff"]),
            initial=p.get("initial", "gaussian"),
        )
        self.k = spec.diffusion_coeff
        self.left = p["side"] == "left"
        full = spec.initial_field()
        half = spec.cells // 2
        self.state = SectionState(full[:half].copy() if self.left else full[half:].copy())
        self.out_port, self.in_port = ("east_out", "east_in") if self.left else ("west_out", "west_in")
        self.timers = PhaseTimers()
        self.halo_times: list[float] = []
        self._started = None

    def intermediate_observation(self, t, ports):
        if self._started is None:
            self._started = time.perf_counter()
        t0 = time.perf_counter()
        edge = self.state.cells[-1] if self.left else self.state.cells[0]
        ports.send(self.out_port, Payload.f64([edge]), t)
        self.timers.send += time.perf_counter() - t0

    def solve_step(self, t, dt, ports):
        t0 = time.perf_counter()
        halo, ht = ports.receive(self.in_port)
        self.halo_times.append(ht)
        t1 = time.perf_counter()
        if self.left:
            self.state.right_halo = float(halo.elements[0])
        else:
            self.state.left_halo = float(halo.elements[0])
        self.state = step_section(self.state, self.k)
        t2 = time.perf_counter()
        self.timers.receive += t1 - t0
        self.timers.compute += t2 - t1

    def final_observation(self, t, ports):
        if self._started is not None:
            self.timers.loop = time.perf_counter() - self._started
        self.result = (self.state.cells, self.timers, self.halo_times)


def canal_topology(spec: CanalSpec) -> Topology:
    spec.check()
    scale = ScaleSpec(1.0, float(spec.iterations))
    common = {
        "length_m": repr(spec.length_m),
        "points_per_metre": repr(spec.points_per_metre),
        "iterations": str(spec.iterations),
        "diffusion_coeff": repr(spec.diffusion_coeff),
        "initial": spec.initial,
    }
    return Topology(
        instances=[
            InstanceSpec("left", "submodel", "canal.section", {**common, "side": "left"}, scale),
            InstanceSpec("right", "submodel", "canal.section", {**common, "side": "right"}, scale),
        ],
        conduits=[
            ConduitSpec(Endpoint("left", "east_out"), Endpoint("right", "west_in")),
            ConduitSpec(Endpoint("right", "west_out"), Endpoint("left", "east_in")),
        ],
    )


@dataclass
class CoupledResult:
    field: np.ndarray
    elapsed: float
    timers: dict[str, PhaseTimers]
    halo_times: dict[str, list[float]]
    messages: int


def run_coupled_detailed(spec: CanalSpec, transport: str = "in_process") -> CoupledResult:
    if transport not in ("in_process", "socket"):
        raise ValueError("transport must be in_process or socket")
    spec.check()
    if spec.iterations == 0:
        return CoupledResult(spec.initial_field(), 0.0, {}, {}, 0)
    doc = ConfigDocument.from_topology(canal_topology(spec))
    placement = {"right": "peer"} if transport == "socket" else {}
    report = run_simulation(RunPlan(doc, placement))
    if not report.ok:
        raise RuntimeError(f"coupled canal run failed: {report.abort_reason or report.errors}")
    left, right = report.outputs["left"], report.outputs["right"]
    return CoupledResult(
        field=np.concatenate([left[0], right[0]]),
        elapsed=max(left[1].loop, right[1].loop),
        timers={"left": left[1], "right": right[1]},
        halo_times={"left": left[2], "right": right[2]},
        messages=len(left[2]) + len(right[2]),
    )


def run_coupled(spec: CanalSpec, transport: str = "in_process") -> tuple[np.ndarray, float]:
    """Left and right halves as two coupled instances; returns field and loop time."""
    r = run_coupled_detailed(spec, transport)
    return r.field, r.elapsed


@dataclass
class EfficiencyRow:
    N: float
    cells: int
    T_mono: float
    T_local: float
    T_distr: float | None = None

    @property
    def epsilon_local(self) -> float:
        return self.T_mono / self.T_local

    @property
    def epsilon_distr(self) -> float | None:
        return None if self.T_distr is None else self.T_mono / self.T_distr


@dataclass
class EfficiencyReport:
    rows: list[EfficiencyRow] = field(default_factory=list)

    COLUMNS = ("N", "cells", "T_mono_s", "T_local_s", "eps_local", "T_distr_s", "eps_distr")

    def table_rows(self) -> list[tuple]:
        return [
            (r.N, r.cells, r.T_mono, r.T_local, r.epsilon_local,
             "" if r.T_distr is None else r.T_distr, "" if r.T_distr is None else r.epsilon_distr)
            for r in self.rows
        ]


def efficiency_sweep(
    N_values: Sequence[float] = DEFAULT_N,
    template: CanalSpec = CanalSpec(),
    repeats: int = 3,
    distributed: bool = False,
) -> EfficiencyReport:
    """Median loop times of monolithic and coupled runs for each grid density.

    With ``distributed`` the halves also run under two socket-connected
    managers, filling ``T_distr``.
    """
    report = EfficiencyReport()
    for N in N_values:
        spec = replace(template, points_per_metre=float(N))
        spec.check()
        mono = statistics.median(run_monolithic(spec)[1] for _ in range(repeats))
        local = statistics.median(run_coupled(spec)[1] for _ in range(repeats))
        distr = None
        if distributed:
            distr = statistics.median(run_coupled(spec, "socket")[1] for _ in range(repeats))
        if not (mono > 0 and local > 0 and (distr is None or distr > 0)) or math.isnan(mono):
            raise RuntimeError(f"non-positive timing at N={N}")
        report.rows.append(EfficiencyRow(float(N), spec.cells, mono, local, distr))
    return report

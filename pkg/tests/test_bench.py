import random
import statistics
import sys
import time

import numpy as np
import pytest
from hypothesis import given, strategies as st

from couplet.bench import (
    DEFAULT_SIZES,
    OVERHEAD_COLUMNS,
    SPEED_COLUMNS,
    Ping,
    fit_line,
    fit_overhead,
    format_table,
    generate_overhead_topology,
    overhead_conduit_counts,
    run_overhead_experiment,
    run_pingpong,
    to_csv,
    tune_allocator,
)
from couplet.errors import DegenerateInput, RankDeficient
from couplet.topology import validate_topology
from oracles import line_fit_ref, overhead_topology_ref

KIB, MIB = 1024, 1 << 20


# --- fit_line ----------------------------------------------------------------


def test_fit_exact_line():
    f = fit_line([(0, 3), (1, 5), (2, 7)])
    assert f.slope == pytest.approx(2, abs=1e-12)
    assert f.intercept == pytest.approx(3, abs=1e-12)
    assert f.r2 == 1.0


def test_fit_hand_computed():
    f = fit_line([(0, 0), (1, 1), (2, 1)])
    assert f.slope == pytest.approx(0.5, abs=1e-12)
    assert f.intercept == pytest.approx(1 / 6, abs=1e-12)
    assert 0 <= f.r2 <= 1


def test_fit_degenerate():
    with pytest.raises(DegenerateInput):
        fit_line([(1, 1), (1, 2)])
    with pytest.raises(DegenerateInput):
        fit_line([(1, 1)])
    with pytest.raises(DegenerateInput):
        fit_line([])


def test_fit_flat_line_has_r2_one():
    assert fit_line([(0, 4), (1, 4), (5, 4)]) .r2 == 1.0


def test_fit_against_oracle_1000_sets():
    rng = random.Random(42)
    for _ in range(1000):
        n = rng.randint(2, 40)
        pts = [(rng.uniform(-100, 100), rng.uniform(-100, 100)) for _ in range(n)]
        if len({x for x, _ in pts}) < 2:
            continue
        f = fit_line(pts)
        slope, intercept = line_fit_ref(pts)
        assert abs(f.slope - slope) <= 1e-9 * max(1, abs(slope))
        assert abs(f.intercept - intercept) <= 1e-9 * max(1, abs(intercept))


@given(
    st.lists(st.integers(-1000, 1000), min_size=2, max_size=30, unique=True),
    st.integers(-50, 50),
    st.integers(-1000, 1000),
)
def test_fit_collinear_exact_and_order_invariant(xs, a, b):
    pts = [(x, a * x + b) for x in xs]
    f = fit_line(pts)
    assert abs(f.slope - a) <= 1e-9 * max(1, abs(a))
    assert abs(f.intercept - b) <= 1e-9 * max(1, abs(b))
    g = fit_line(list(reversed(pts)))
    assert abs(g.slope - f.slope) <= 1e-9 * max(1, abs(a)) and abs(g.intercept - f.intercept) <= 1e-9 * max(1, abs(b))


# --- fit_overhead ------------------------------------------------------------


def plane(n, m):
    return 1 + 0.002 * n + 0.0001 * m


def test_overhead_exact_plane():
    pts = [(n, m, plane(n, m)) for n in (1, 10, 50) for m in (0, 100)]
    f = fit_overhead(pts)
    assert f.a == pytest.approx(1, abs=1e-9)
    assert f.b == pytest.approx(0.002, abs=1e-9)
    assert f.c == pytest.approx(0.0001, abs=1e-9)
    assert f.min_time == min(t for *_, t in pts)
    assert f.predict(10, 100) == pytest.approx(plane(10, 100))


def test_overhead_rank_deficient():
    with pytest.raises(RankDeficient):
        fit_overhead([(0, 0, 1.0), (0, 0, 1.1), (0, 0, 0.9)])
    with pytest.raises(RankDeficient):
        fit_overhead([(1, 2, 1.0), (2, 4, 2.0), (3, 6, 3.0)])  # m proportional to n
    with pytest.raises(RankDeficient):
        fit_overhead([(1, 0, 1.0), (2, 0, 2.0)])


def test_overhead_noisy_plane():
    rng = np.random.default_rng(2024)
    a, b, c = 0.5, 0.01, 0.002
    pts = []
    for n in range(1, 31):
        for m in range(0, 36 * 20, 20):
            t = a + b * n + c * m
            pts.append((n, m, t * (1 + rng.uniform(-0.01, 0.01))))
    f = fit_overhead(pts)
    assert f.a == pytest.approx(a, rel=0.05)
    assert f.b == pytest.approx(b, rel=0.05)
    assert f.c == pytest.approx(c, rel=0.05)


# --- overhead topology -------------------------------------------------------


def test_overhead_topology_n4_m8():
    t = generate_overhead_topology(4, 8)
    assert len(t.conduits) == 8
    assert [len(t.conduits_from(f"s{i}")) for i in range(4)] == [2, 2, 2, 2]
    assert validate_topology(t) == []


@pytest.mark.parametrize("n,m", [(1, 0), (2, 1), (3, 7), (5, 23), (10, 100), (7, 0)])
def test_overhead_topology_matches_oracle(n, m):
    t = generate_overhead_topology(n, m)
    got = sorted((int(c.src.instance[1:]), int(c.dst.instance[1:])) for c in t.conduits)
    assert got == sorted(overhead_topology_ref(n, m))
    assert sum(overhead_conduit_counts(n, m)) == m
    assert validate_topology(t) == []


def test_overhead_topology_rejects_impossible():
    with pytest.raises(ValueError):
        overhead_conduit_counts(1, 3)
    with pytest.raises(ValueError):
        overhead_conduit_counts(0, 0)


def test_overhead_smoke():
    res = run_overhead_experiment([1], [0], repeats=1)
    assert len(res.samples) == 1 and res.samples[0][2] > 0
    assert res.fit is None  # one point does not span a plane


def test_overhead_experiment_fits():
    res = run_overhead_experiment([2, 4, 8], [0, 16, 32], repeats=1)
    assert len(res.samples) == 9 and res.fit is not None
    assert all(t > 0 for *_, t in res.samples)


# --- ping-pong ---------------------------------------------------------------


def test_default_sizes():
    assert DEFAULT_SIZES[0] == 0 and DEFAULT_SIZES[1] == KIB and DEFAULT_SIZES[-1] == 64 * MIB
    assert len(DEFAULT_SIZES) == 18


@pytest.mark.parametrize("transport", ["in_process", "socket", "relay"])
def test_pingpong_echo_and_stats(transport):
    sizes = [0, KIB, 64 * KIB, MIB]
    r = run_pingpong(transport, sizes, round_trips=10, relay_base_port=random.randrange(30000, 45000, 100))
    assert r.mismatches == 0
    assert r.sizes == sizes and set(r.mean) == set(sizes)
    for s in sizes:
        assert 0 < r.minimum[s] <= r.mean[s]
    assert r.latency == min(r.minimum.values())
    assert r.latency <= min(r.mean.values())
    assert r.throughput > 0 and r.fit is not None


def test_pingpong_rejects_bad_input():
    with pytest.raises(ValueError):
        run_pingpong("pigeon", [0])
    with pytest.raises(ValueError):
        run_pingpong("in_process", [], 10)
    with pytest.raises(ValueError):
        run_pingpong("in_process", [0], 0)


def test_tune_allocator_is_idempotent():
    first = tune_allocator()
    assert tune_allocator() == first
    assert first or not sys.platform.startswith("linux")


class BulkTimedPing(Ping):
    """Accumulates send-to-echo time per size on its own clock, outside Ping's timers."""

    def init(self, t0, ports):
        super().init(t0, ports)
        self.bulk_ns = {}

    def intermediate_observation(self, t, ports):
        self._t_ns = time.monotonic_ns()
        super().intermediate_observation(t, ports)

    def solve_step(self, t, dt, ports):
        payload, _ = ports.receive("pong")
        elapsed_ns = time.monotonic_ns() - self._t_ns
        size, timed = self._slot(t)
        if timed:
            self.bulk_ns[size] = self.bulk_ns.get(size, 0) + elapsed_ns
            self.result.setdefault(size, []).append(time.perf_counter() - self._started)


@pytest.mark.parametrize("transport", ["in_process", "socket"])
def test_throughput_matches_bulk_stopwatch(transport):
    tune_allocator()
    sizes = [s for s in DEFAULT_SIZES if s <= 16 * MIB]
    ratios = []
    for _ in range(3):
        holder = {}

        class Probe(BulkTimedPing):
            def __init__(self, *a, **k):
                super().__init__(*a, **k)
                holder["ping"] = self

        r = run_pingpong(transport, sizes, round_trips=30, ping_cls=Probe)
        bulk = 16 * MIB * 2 * 30 / (holder["ping"].bulk_ns[16 * MIB] * 1e-9)
        ratios.append(r.throughput / bulk)
    assert statistics.median(ratios) == pytest.approx(1, rel=0.10)


# --- output ------------------------------------------------------------------


def test_csv_and_table():
    rows = [("socket", 1024, 1.5e-5, 1.2e-5)]
    text = to_csv(SPEED_COLUMNS, rows)
    assert text.splitlines() == ["transport,size_bytes,mean_s,min_s", "socket,1024,1.5e-05,1.2e-05"]
    table = format_table(SPEED_COLUMNS, rows).splitlines()
    assert len(table) == 3 and "size_bytes" in table[0] and set(table[1]) <= {"-", " "}
    assert to_csv(OVERHEAD_COLUMNS, [(1, 0, 0.25)]).splitlines()[1] == "1,0,0.25"

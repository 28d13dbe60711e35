"""Command-line entry point: ``couplet <subcommand> ...``.

Exit codes: 0 success, 1 invalid configuration, 2 runtime abort, 64 usage.
"""

from __future__ import annotations

import argparse
import dataclasses
import importlib
import logging
import re
import sys

from . import bench, canal, demo  # noqa: F401  registers implementations
from .config import load_config
from .errors import ConfigError, InvalidTopology, StartupError, UnknownInstance
from .relay import DEFAULT_BUFFER_LIMIT, PeerSpec, RelayConfig, run_relay
from .runtime import ManagerEndpoint, RunPlan, host_manager, join_manager
from .transport import Location, PortRange

EXIT_OK, EXIT_INVALID, EXIT_ABORT, EXIT_USAGE = 0, 1, 2, 64
FINAL_LINE = "all instances deregistered"

log = logging.getLogger("couplet")

_SIZE_RE = re.compile(r"(\d+)\s*(|B|K|KiB|M|MiB)\Z", re.IGNORECASE)
_SIZE_UNITS = {"": 1, "b": 1, "k": 1024, "kib": 1024, "m": 1 << 20, "mib": 1 << 20}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _size(text: str) -> int:
    m = _SIZE_RE.match(text.strip())
    if not m:
        raise argparse.ArgumentTypeError(f"bad size {text!r}")
    return int(m.group(1)) * _SIZE_UNITS[m.group(2).lower()]


def _location(text: str) -> Location:
    try:
        return Location.parse(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _port_range(text: str) -> PortRange:
    try:
        return PortRange.parse(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _peer(text: str) -> PeerSpec:
    try:
        return PeerSpec.parse(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _placement(text: str) -> tuple[str, str]:
    inst, eq, mgr = text.partition("=")
    if not (eq and inst and mgr):
        raise argparse.ArgumentTypeError(f"expected INSTANCE=MANAGER, got {text!r}")
    return inst, mgr


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="couplet", description="Run and measure coupled multiscale simulations.")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    v = sub.add_parser("validate", help="check a configuration file")
    v.add_argument("config")

    r = sub.add_parser("run", help="run a simulation, or this process's share of one")
    r.add_argument("config")
    r.add_argument("--manager", type=_location, help="join the simulation manager at HOST:PORT")
    r.add_argument("--place", type=_placement, action="append", default=[], metavar="INSTANCE=MANAGER")
    r.add_argument("--as", dest="manager_id", default=RunPlan.DEFAULT, metavar="MANAGER",
                   help="which manager this process is (default: main)")
    r.add_argument("--listen", type=_location, default=Location("127.0.0.1", 0),
                   help="simulation manager address when hosting (default 127.0.0.1:0)")
    r.add_argument("--host", default="127.0.0.1", help="address for this manager's data listener")
    r.add_argument("--port-range", type=_port_range, help="ports this manager may listen on, LO:HI")
    r.add_argument("--relay", type=_location, help="relay for destinations outside --port-range")
    r.add_argument("--import", dest="imports", action="append", default=[], metavar="MODULE",
                   help="import a module that registers implementations")

    b = sub.add_parser("bench-speed", help="ping-pong latency and throughput")
    b.add_argument("--transport", choices=bench.TRANSPORTS, default="in_process")
    b.add_argument("--sizes", type=_size, nargs="+", help="message sizes (bytes, or with K/M suffix)")
    b.add_argument("--max-size", type=_size, default=bench.DESK_MAX_SIZE,
                   help="drop default sizes above this (default 16M)")
    b.add_argument("--round-trips", type=int, default=100)
    b.add_argument("--out", help="write CSV here instead of stdout")

    o = sub.add_parser("bench-overhead", help="startup overhead against submodel and conduit counts")
    o.add_argument("--n-values", type=int, nargs="+", required=True)
    o.add_argument("--m-values", type=int, nargs="+", required=True)
    o.add_argument("--repeats", type=int, default=3)
    o.add_argument("--out", help="write CSV here instead of stdout")

    y = sub.add_parser("relay", help="run a forwarding relay")
    y.add_argument("--range", dest="local_range", type=_port_range, required=True)
    y.add_argument("--peer", type=_peer, action="append", default=[], metavar="NAME=HOST:PORT,LO:HI")
    y.add_argument("--buffer-limit", type=int, default=DEFAULT_BUFFER_LIMIT)
    y.add_argument("--name", default="relay")
    y.add_argument("--listen", type=_location, help="listen address (default: first port of --range)")

    c = sub.add_parser("demo-canal", help="monolithic against coupled canal efficiency")
    c.add_argument("--N-values", dest="n_values", type=float, nargs="+", default=list(canal.DEFAULT_N))
    c.add_argument("--iterations", type=int, default=100)
    c.add_argument("--length", type=float, default=canal.CanalSpec.length_m, help="canal length in metres")
    c.add_argument("--repeats", type=int, default=3)
    c.add_argument("--distributed", action="store_true", help="also time two socket-connected managers")
    c.add_argument("--out", help="write CSV here instead of stdout")
    return p


def _emit(columns, rows, out: str | None) -> None:
    sys.stdout.write(bench.format_table(columns, rows))
    text = bench.to_csv(columns, rows)
    if out:
        with open(out, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        sys.stdout.write("\n" + text)


def cmd_validate(args) -> int:
    try:
        load_config(args.config)
    except InvalidTopology as exc:
        for v in exc.violations:
            print(v)
        return EXIT_INVALID
    except ConfigError as exc:
        print(f"{args.config}: {exc}")
        return EXIT_INVALID
    except OSError as exc:
        print(f"{args.config}: {exc.strerror or exc}")
        return EXIT_INVALID
    return EXIT_OK


def cmd_run(args) -> int:
    sys.path.insert(0, "")
    for mod in args.imports:
        importlib.import_module(mod)
    try:
        doc = load_config(args.config)
    except (ConfigError, InvalidTopology, OSError) as exc:
        log.error("%s: %s", args.config, exc)
        return EXIT_INVALID
    endpoint = ManagerEndpoint(host=args.host, port_range=args.port_range, relay=args.relay)
    plan = RunPlan(doc, dict(args.place), {args.manager_id: endpoint})
    try:
        if args.manager is not None:
            report = join_manager(plan, args.manager_id, args.manager)
        else:
            def announce(addr):
                print(f"simulation manager listening on {addr}", flush=True)

            report = host_manager(plan, args.manager_id, args.listen, on_listening=announce)
    except (StartupError, UnknownInstance, InvalidTopology) as exc:
        log.error("%s", exc)
        return EXIT_INVALID
    for name, status in report.statuses.items():
        log.info("%s: %s%s", name, status, f" ({report.errors[name]})" if name in report.errors else "")
    if report.exit_code != 0:
        log.error("simulation aborted: %s", report.abort_reason)
        return EXIT_ABORT
    log.info(FINAL_LINE)
    return EXIT_OK


def cmd_bench_speed(args) -> int:
    sizes = args.sizes or [s for s in bench.DEFAULT_SIZES if s <= args.max_size]
    bench.tune_allocator()
    r = bench.run_pingpong(args.transport, sizes, args.round_trips)
    _emit(bench.SPEED_COLUMNS, r.rows(), args.out)
    print(f"latency_s={r.latency:.9g} throughput_Bps={r.throughput:.9g}")
    return EXIT_OK


def cmd_bench_overhead(args) -> int:
    res = bench.run_overhead_experiment(args.n_values, args.m_values, args.repeats)
    _emit(bench.OVERHEAD_COLUMNS, res.rows(), args.out)
    if res.fit is None:
        print("fit: samples do not span a plane in (n, m)")
    else:
        f = res.fit
        print(f"a={f.a:.6g} b={f.b:.6g} c={f.c:.6g} min_T={f.min_time:.6g}")
    return EXIT_OK


def cmd_relay(args) -> int:
    cfg = RelayConfig(args.local_range, list(args.peer), args.buffer_limit, args.name, args.listen)
    try:
        cfg.check()
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    run_relay(cfg)
    return EXIT_OK


def cmd_demo_canal(args) -> int:
    template = canal.CanalSpec(length_m=args.length, iterations=args.iterations)
    try:
        for n in args.n_values:
            dataclasses.replace(template, points_per_metre=n).check()
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    report = canal.efficiency_sweep(args.n_values, template, args.repeats, args.distributed)
    _emit(canal.EfficiencyReport.COLUMNS, report.table_rows(), args.out)
    return EXIT_OK


COMMANDS = {
    "validate": cmd_validate,
    "run": cmd_run,
    "bench-speed": cmd_bench_speed,
    "bench-overhead": cmd_bench_overhead,
    "relay": cmd_relay,
    "demo-canal": cmd_demo_canal,
}


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(
            level=logging.DEBUG if args.verbose else logging.INFO,
            format="%(message)s",
            stream=sys.stderr,
        )
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except KeyboardInterrupt:
        return EXIT_ABORT


if __name__ == "__main__":
    sys.exit(main())

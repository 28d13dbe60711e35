import csv
import io
import os
import signal
import subprocess
import sys
from pathlib import Path

import pytest

from couplet.cli import EXIT_ABORT, EXIT_INVALID, EXIT_OK, EXIT_USAGE, FINAL_LINE, main

ROOT = Path(__file__).resolve().parent.parent
MACRO_MICRO = str(ROOT / "configs" / "macro_micro.cfg")
MONITORED = str(ROOT / "configs" / "macro_micro_monitored.cfg")


def cli(*args, timeout=120):
    return subprocess.run(
        [sys.executable, "-m", "couplet.cli", *args], capture_output=True, text=True, timeout=timeout, cwd=ROOT
    )


def test_validate_ok_is_silent(capsys):
    assert main(["validate", MACRO_MICRO]) == EXIT_OK
    out = capsys.readouterr()
    assert out.out == "" and out.err == ""


def test_validate_duplicate_instance(tmp_path, capsys):
    cfg = tmp_path / "dup.cfg"
    cfg.write_text("instance a source:x.y\ninstance a sink:x.z\n")
    assert main(["validate", str(cfg)]) == EXIT_INVALID
    lines = capsys.readouterr().out.splitlines()
    assert len(lines) == 1 and "a" in lines[0]


def test_validate_structural_violations(tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("instance a source:x.y\ninstance b sink:x.z\nconduit b.out -> a.in\n")
    assert main(["validate", str(cfg)]) == EXIT_INVALID
    out = capsys.readouterr().out
    assert "SourceInPort" in out and "SinkOutPort" in out


def test_validate_missing_file(tmp_path, capsys):
    assert main(["validate", str(tmp_path / "nope.cfg")]) == EXIT_INVALID
    assert capsys.readouterr().out.strip()


@pytest.mark.parametrize(
    "argv",
    [[], ["frobnicate"], ["validate"], ["validate", "a", "--bogus"], ["bench-speed", "--transport", "carrier-pigeon"],
     ["bench-speed", "--sizes", "12Q"], ["relay"], ["relay", "--range", "9"], ["run", "x.cfg", "--place", "oops"],
     ["demo-canal", "--N-values", "0.1", "--length", "10"]],
)
def test_usage_errors_exit_64(argv, capsys):
    assert main(argv) == EXIT_USAGE
    assert capsys.readouterr().err.strip()


def test_relay_overlapping_ranges_is_usage_error(capsys):
    assert main(["relay", "--range", "9000:9099", "--peer", "p=127.0.0.1:9100,9050:9150"]) == EXIT_USAGE


def test_run_prints_final_line():
    r = cli("run", MACRO_MICRO)
    assert r.returncode == EXIT_OK, r.stderr
    assert r.stderr.strip().splitlines()[-1] == FINAL_LINE


def test_run_invalid_config_exit_1(tmp_path):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("instance a submodel:demo.macro\n")  # no scale
    assert cli("run", str(cfg)).returncode == EXIT_INVALID


def test_run_unknown_impl_exit_1(tmp_path):
    cfg = tmp_path / "x.cfg"
    cfg.write_text("instance a source:nowhere.impl\n")
    r = cli("run", str(cfg))
    assert r.returncode == EXIT_INVALID and "nowhere.impl" in r.stderr


def test_run_abort_exit_2(tmp_path):
    mod = tmp_path / "boom_impl.py"
    mod.write_text(
        "from couplet.kernel import Source, register_impl\n"
        "@register_impl('test.boom')\n"
        "class Boom(Source):\n"
        "    def produce(self, ports):\n"
        "        raise RuntimeError('boom')\n"
    )
    cfg = tmp_path / "b.cfg"
    cfg.write_text("instance a source:test.boom\ninstance k sink:demo.monitor\nconduit a.out -> k.in\n")
    env = dict(os.environ, PYTHONPATH=str(tmp_path) + os.pathsep + os.environ.get("PYTHONPATH", ""))
    r = subprocess.run(
        [sys.executable, "-m", "couplet.cli", "run", str(cfg), "--import", "boom_impl"],
        capture_output=True, text=True, timeout=60, env=env,
    )
    assert r.returncode == EXIT_ABORT and "boom" in r.stderr


def test_two_process_run():
    host = subprocess.Popen(
        [sys.executable, "-m", "couplet.cli", "run", MONITORED, "--place", "micro=b", "--place", "monitor=b"],
        stdout=subprocess.PIPE, stderr=subprocess.PIPE, text=True, cwd=ROOT,
    )
    try:
        line = host.stdout.readline()
        assert line.startswith("simulation manager listening on ")
        address = line.rsplit(" ", 1)[1].strip()
        joiner = cli("run", MONITORED, "--manager", address, "--as", "b",
                     "--place", "micro=b", "--place", "monitor=b")
        assert joiner.returncode == EXIT_OK, joiner.stderr
        assert host.wait(60) == EXIT_OK
        assert host.stderr.read().strip().splitlines()[-1] == FINAL_LINE
    finally:
        if host.poll() is None:
            host.kill()


def test_bench_speed_csv(tmp_path):
    out = tmp_path / "speed.csv"
    r = cli("bench-speed", "--transport", "socket", "--sizes", "0", "1K", "64K", "--round-trips", "5", "--out", str(out))
    assert r.returncode == EXIT_OK, r.stderr
    rows = list(csv.reader(io.StringIO(out.read_text())))
    assert rows[0] == ["transport", "size_bytes", "mean_s", "min_s"]
    assert [row[1] for row in rows[1:]] == ["0", "1024", "65536"]
    assert "latency_s=" in r.stdout and "size_bytes" in r.stdout


def test_bench_overhead_stdout():
    r = cli("bench-overhead", "--n-values", "2", "4", "--m-values", "0", "4", "--repeats", "1")
    assert r.returncode == EXIT_OK, r.stderr
    assert "n,m,T_s" in r.stdout and "a=" in r.stdout


def test_demo_canal(tmp_path):
    out = tmp_path / "canal.csv"
    r = cli("demo-canal", "--N-values", "0.5", "1", "--iterations", "5", "--length", "20", "--repeats", "1", "--out", str(out))
    assert r.returncode == EXIT_OK, r.stderr
    rows = list(csv.reader(io.StringIO(out.read_text())))
    assert rows[0][:5] == ["N", "cells", "T_mono_s", "T_local_s", "eps_local"] and len(rows) == 3


def test_relay_daemon_starts_and_stops():
    p = subprocess.Popen(
        [sys.executable, "-m", "couplet.cli", "relay", "--range", "47000:47049", "--listen", "127.0.0.1:0"],
        stdout=subprocess.PIPE, stderr=subprocess.PIPE, text=True,
    )
    try:
        line = p.stderr.readline()
        assert "listening" in line
        p.send_signal(signal.SIGINT)
        assert p.wait(10) == EXIT_OK
    finally:
        if p.poll() is None:
            p.kill()

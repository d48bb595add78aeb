import csv
import socket
import subprocess
import sys
import time

import pytest
from click.testing import CliRunner

from fogdetect.cli import main
from fogdetect.master.config import MasterSettings, load_master_settings
from fogdetect.preprocess import Mode

SCENARIO = """
name = "{name}"
mode = "{mode}"
rate_per_min = 10
duration_s = 120
client_rescale = true

[payload]
width = 400
height = 300

[[workers]]
id = "fog-1"
tier = "{tier}"
latency = "{latency}"
link = {{ latency_ms = {link_ms}, bandwidth_bytes_per_s = 12500000 }}
power = {{ idle_watts = {idle}, busy_watts = {busy} }}
"""


def write_scenario(tmp_path, name, mode="accuracy", tier="fog", link_ms=2):
    # cloud VMs are jumpier and draw more power than fog nodes
    latency, idle, busy = ("uniform:100:80", 60, 90) if tier == "cloud" else ("uniform:100:40", 12, 15)
    path = tmp_path / f"{name}.toml"
    path.write_text(SCENARIO.format(name=name, mode=mode, tier=tier, link_ms=link_ms, latency=latency,
                                    idle=idle, busy=busy))
    return path


def test_harness_run_writes_outputs(tmp_path):
    path = write_scenario(tmp_path, "fog1")
    out = tmp_path / "out"
    result = CliRunner().invoke(main, ["harness", "run", "--scenario", str(path), "--out", str(out)])
    assert result.exit_code == 0, result.output
    assert "fog x1" in result.output
    for name in ("ledger.csv", "completions.csv", "report.csv", "summary.txt", "transitions.log"):
        assert (out / name).exists()
    assert any(out.glob("*.png"))
    with open(out / "report.csv") as fh:
        (row,) = list(csv.DictReader(fh))
    assert row["completed"] == "20"


def test_harness_compare_flags_contradictions(tmp_path):
    runner = CliRunner()
    reports = []
    for name, tier, link in (("fog", "fog", 2), ("cloud", "cloud", 50)):
        out = tmp_path / name
        path = write_scenario(tmp_path, name, tier=tier, link_ms=link)
        assert runner.invoke(main, ["harness", "run", "--scenario", str(path), "--out", str(out), "--no-figures"]).exit_code == 0
        reports.append(str(out / "report.csv"))
    ok = runner.invoke(main, ["harness", "compare", *reports, "--out", str(tmp_path / "cmp.csv")])
    assert ok.exit_code == 0, ok.output
    assert "consistent" in ok.output
    assert (tmp_path / "cmp.csv").exists()

    # same pair with the fog run slowed beyond the cloud one contradicts the expected ordering
    slow = write_scenario(tmp_path, "slowfog", link_ms=500)
    out = tmp_path / "slowfog"
    runner.invoke(main, ["harness", "run", "--scenario", str(slow), "--out", str(out), "--no-figures"])
    bad = runner.invoke(main, ["harness", "compare", str(out / "report.csv"), reports[1]])
    assert bad.exit_code == 1
    assert "contradicts" in bad.output


def test_harness_compare_needs_two(tmp_path):
    path = write_scenario(tmp_path, "one")
    out = tmp_path / "one"
    CliRunner().invoke(main, ["harness", "run", "--scenario", str(path), "--out", str(out), "--no-figures"])
    result = CliRunner().invoke(main, ["harness", "compare", str(out / "report.csv")])
    assert result.exit_code != 0


def test_harness_run_missing_fixtures_fails(tmp_path):
    path = tmp_path / "bad.toml"
    path.write_text('[[workers]]\nid = "w"\ndetector = "tensorfile"\nfixtures = "nowhere"\n')
    result = CliRunner().invoke(main, ["harness", "run", "--scenario", str(path), "--out", str(tmp_path / "o")])
    assert result.exit_code != 0
    assert "does not exist" in result.output


def test_harness_suite_short(tmp_path):
    result = CliRunner().invoke(main, ["harness", "suite", "--out", str(tmp_path), "--duration", "120", "--no-figures"])
    assert result.exit_code == 0, result.output
    assert "FAIL" not in result.output
    assert (tmp_path / "report.csv").exists()
    assert (tmp_path / "checks.txt").exists()


def test_worker_requires_fixtures_for_tensorfile():
    result = CliRunner().invoke(main, ["worker", "--master", "127.0.0.1:1", "--id", "w", "--detector", "tensorfile"])
    assert result.exit_code != 0
    assert "--fixtures" in result.output


def test_client_needs_an_image_source():
    result = CliRunner().invoke(main, ["client", "--master", "127.0.0.1:1"])
    assert result.exit_code != 0


# -- master settings -------------------------------------------------------


def test_master_settings_file(tmp_path):
    path = tmp_path / "m.toml"
    path.write_text('listen_http = "0.0.0.0:1"\nmode_default = "latency"\nmax_attempts = 2\n')
    settings = load_master_settings(path)
    assert settings.listen_http == "0.0.0.0:1"
    cfg = settings.merged({"max_attempts": None, "queue_wait_timeout_ms": 500}).scheduler_config()
    assert cfg.max_attempts == 2
    assert cfg.queue_wait_timeout_ms == 500
    assert cfg.mode_default is Mode.LOW_LATENCY
    assert MasterSettings().scheduler_config().heartbeat_timeout_us == 6_000_000


def test_master_settings_rejects_unknown_keys(tmp_path):
    path = tmp_path / "m.toml"
    path.write_text("colour = 3\n")
    with pytest.raises(ValueError, match="colour"):
        load_master_settings(path)


# -- separate processes ----------------------------------------------------


def free_port() -> int:
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


def test_master_worker_client_processes(tmp_path):
    http, wport = free_port(), free_port()
    cmd = [sys.executable, "-m", "fogdetect.cli"]
    master = subprocess.Popen(cmd + ["master", "--listen-http", f"127.0.0.1:{http}", "--listen-worker",
                                     f"127.0.0.1:{wport}", "--transition-log", str(tmp_path / "t.log")],
                              stdout=subprocess.DEVNULL, stderr=subprocess.DEVNULL)
    worker = None
    try:
        time.sleep(0.5)
        worker = subprocess.Popen(cmd + ["worker", "--master", f"127.0.0.1:{wport}", "--id", "fog-1",
                                         "--latency", "fixed:50", "--heartbeat-interval-ms", "200"],
                                  stdout=subprocess.DEVNULL, stderr=subprocess.DEVNULL)
        out = tmp_path / "client.csv"
        result = CliRunner().invoke(main, ["client", "--master", f"127.0.0.1:{http}", "--declared-bytes", "5000",
                                           "--width", "200", "--height", "110", "--rate", "600", "--count", "5",
                                           "--out", str(out)])
        assert result.exit_code == 0, result.output
        with open(out) as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 5
        assert {r["status"] for r in rows} == {"200"}
    finally:
        for p in (worker, master):
            if p is not None:
                p.terminate()
                p.wait(timeout=10)
    assert "Done" in (tmp_path / "t.log").read_text()

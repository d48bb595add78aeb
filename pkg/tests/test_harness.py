import math
from collections import Counter
from fractions import Fraction

import pytest

from fogdetect.detection import BoundingBox, Detection, GridSpec, encode, write_grid
from fogdetect.harness import LinkModel, Scenario, VirtualClock, client_inject, load_scenario, run_simulation
from fogdetect.harness.clock import LAN, WAN_FAR, WAN_NEAR
from fogdetect.harness.report import (
    build_report,
    compare_reports,
    read_reports_csv,
    render_figures,
    summary_text,
    write_reports_csv,
)
from fogdetect.harness.scenario import FaultSpec, PayloadSpec, ScenarioError, WorkerSpec
from fogdetect.metrics import Direction, PowerSpec
from fogdetect.preprocess import Mode
from fogdetect.worker import LatencyModel

US = 1_000_000
DET = Detection(BoundingBox(0.5, 0.5, 0.2, 0.2), 0, 0.63)


def fixed(ms):
    return LatencyModel.parse(f"fixed:{ms}")


def fog(worker_id="fog-1", latency=None, link=LAN, **kw):
    return WorkerSpec(worker_id, "fog", "mock", latency or fixed(100), link, canned=(DET,), **kw)


def scenario(workers, **kw):
    kw.setdefault("duration_s", 600)
    kw.setdefault("rate_per_min", 10)
    return Scenario(name=kw.pop("name", "t"), workers=tuple(workers), **kw)


def oracle_transfer_us(link: LinkModel, nbytes: int) -> int:
    # link delay written out from the declared link parameters, in whole microseconds
    return math.ceil(Fraction(str(link.latency_ms)) * 1000 + Fraction(nbytes) * US / Fraction(str(link.bandwidth_bytes_per_s)))


# -- client_inject ---------------------------------------------------------


def test_inject_ten_per_minute():
    subs = client_inject(10, 60)
    assert [s.time_us for s in subs] == [k * 6 * US for k in range(10)]
    assert len({s.image_id for s in subs}) == 10


def test_inject_counts():
    assert len(client_inject(1, 59)) == 1
    assert len(client_inject(10, 600)) == 100
    assert client_inject(10, 0) == []
    with pytest.raises(ValueError):
        client_inject(0, 10)


def test_inject_fractional_interval_is_exact():
    subs = client_inject(7, 60)
    assert [s.time_us for s in subs] == [round(Fraction(60 * US, 7) * k) for k in range(7)]


# -- virtual clock and links -----------------------------------------------


def test_clock_ties_run_in_insertion_order():
    clock = VirtualClock()
    seen = []
    for tag in "abc":
        clock.call_at(5, seen.append, tag)
    clock.call_at(1, seen.append, "first")
    clock.run()
    assert seen == ["first", "a", "b", "c"]
    assert clock.now == 5
    with pytest.raises(ValueError):
        clock.call_at(4, seen.append, "past")


def test_clock_cancel_and_until():
    clock = VirtualClock()
    seen = []
    t = clock.call_at(3, seen.append, "x")
    clock.call_at(10, seen.append, "y")
    t.cancel()
    clock.run(until_us=7)
    assert seen == []
    assert clock.now == 7
    assert clock.pending() == 1


@pytest.mark.parametrize("link", [LAN, WAN_NEAR, WAN_FAR, LinkModel(0.3, 3)])
@pytest.mark.parametrize("nbytes", [0, 1, 166, 4956, 943_718])
def test_link_transfer_matches_oracle(link, nbytes):
    assert link.transfer_us(nbytes) == oracle_transfer_us(link, nbytes)


def test_link_examples():
    assert LAN.transfer_us(0) == 2000
    assert LAN.transfer_us(12_500_000) == 1_002_000
    assert WAN_FAR.transfer_us(2_500_000) - WAN_NEAR.transfer_us(2_500_000) == 100_000
    with pytest.raises(ValueError):
        LinkModel(-1, 1)
    with pytest.raises(ValueError):
        LinkModel(1, 0)


# -- end-to-end scenarios --------------------------------------------------


@pytest.fixture(scope="module")
def fog1_run():
    return run_simulation(scenario([fog()], payload=PayloadSpec(declared_bytes=943_718)))


def test_fog1_closed_form_response(fog1_run):
    result = fog1_run
    assert len(result.clients) == 100
    assert all(r.status == 200 for r in result.clients.values())
    by_image = {}
    for e in result.ledger.entries:
        # each message's delay is exactly its link transfer time
        assert e.recv_time_us - e.send_time_us == oracle_transfer_us(LAN, e.bytes_on_wire)
        by_image.setdefault(e.image_id, []).append(e)
    for img, rec in result.clients.items():
        legs = by_image[img]
        assert sorted(e.direction for e in legs) == sorted(Direction)
        expected_us = sum(oracle_transfer_us(LAN, e.bytes_on_wire) for e in legs) + 100_000
        assert rec.recv_us - rec.sent_us == expected_us
    # with tiny reply messages this sits close to latency-dominated arithmetic on the two payload legs
    rough = 4 * 2 + 2 * 943_718 / 12_500 + 100
    for rec in result.clients.values():
        assert abs(rec.response_ms - rough) < 1.0


def test_fog1_report(fog1_run):
    report = build_report(fog1_run)
    assert report.completed == 100
    assert report.fpm == 10.0
    assert report.failed == report.timeouts == 0
    assert report.jitter_ms == 0.0
    assert report.mean_compute_ms == 100.0
    assert report.bytes_gateway_to_master > 100 * 943_718
    assert "fog x1" in summary_text(report)


def test_conservation(fog1_run):
    responses = Counter(e.image_id for e in fog1_run.ledger.entries if e.direction is Direction.MASTER_TO_GATEWAY)
    assert set(responses) == set(fog1_run.clients)
    assert set(responses.values()) == {1}


def test_zero_duration_is_empty():
    result = run_simulation(scenario([fog()], duration_s=0))
    assert result.ledger.entries == []
    assert result.ledger.completions == []
    report = build_report(result)
    assert report.submitted == report.completed == 0
    assert report.fpm == 0.0
    assert report.mean_response_ms is None
    assert report.jitter_ms is None


def test_cloud_far_minus_near_is_link_arithmetic():
    def mean(link):
        w = WorkerSpec("cloud-1", "cloud", "mock", fixed(300), link, canned=(DET,))
        return build_report(run_simulation(scenario([w], duration_s=120))).mean_response_ms

    # only the master-worker legs differ: one request and one reply, 100 ms each
    assert mean(WAN_FAR) - mean(WAN_NEAR) == pytest.approx(200.0, abs=1e-9)


def test_kill_one_of_two_workers_mid_run():
    workers = [fog("fog-1", fixed(1500)), fog("fog-2", fixed(1500))]
    sc = scenario(workers, rate_per_min=60, duration_s=50, faults=(FaultSpec("fog-1", "kill", 25.5),))
    result = run_simulation(sc)
    assert len(result.clients) == 50
    assert all(r.status == 200 for r in result.clients.values())
    done = Counter(c.image_id for c in result.ledger.completions)
    assert set(done.values()) == {1}
    assert result.duplicates_dropped == 0
    requeued = [t for t in result.transitions if t.from_state == "Dispatched" and t.to_state == "Queued"]
    assert len(requeued) == 1
    assert result.outstanding_mismatches == 0


def test_stalled_worker_late_result_is_dropped():
    workers = [fog("fog-1", fixed(1500)), fog("fog-2", fixed(1500))]
    sc = scenario(workers, rate_per_min=60, duration_s=40, faults=(FaultSpec("fog-1", "stall", 10.2, 12.0),))
    result = run_simulation(sc)
    assert all(r.status == 200 for r in result.clients.values())
    assert Counter(c.image_id for c in result.ledger.completions).most_common(1)[0][1] == 1
    assert result.duplicates_dropped >= 1
    # the stalled worker re-registers after being reaped and takes work again
    late = [t for t in result.transitions if t.worker_id == "fog-1" and t.time_us > 30 * US]
    assert late


def test_no_workers_yields_503_after_queue_wait():
    result = run_simulation(scenario([], duration_s=12))
    statuses = Counter(r.status for r in result.clients.values())
    assert statuses == {503: 2}
    first = result.clients["img00000"]
    assert first.response_ms == pytest.approx(10_000 + 2 * 2 + 943_718 / 12_500, abs=1)


def test_same_seed_same_bytes(tmp_path):
    workers = [fog("fog-1", LatencyModel.parse("uniform:80:40", seed=3)),
               fog("fog-2", LatencyModel.parse("uniform:80:40", seed=3))]
    sc = scenario(workers, duration_s=120, seed=3)
    paths = []
    for k in range(2):
        result = run_simulation(sc)
        d = tmp_path / str(k)
        d.mkdir()
        result.ledger.write_csv(d / "ledger.csv")
        write_reports_csv([build_report(result)], d / "report.csv")
        paths.append(d)
    for name in ("ledger.csv", "report.csv"):
        assert (paths[0] / name).read_bytes() == (paths[1] / name).read_bytes()


def test_latency_mode_payload_shrinks_on_the_gateway():
    base = dict(duration_s=60, payload=PayloadSpec(width=400, height=300))
    acc = build_report(run_simulation(scenario([fog()], mode=Mode.HIGH_ACCURACY, **base)))
    lat = build_report(run_simulation(scenario([fog()], mode=Mode.LOW_LATENCY, client_rescale=True, **base)))
    assert acc.bytes_gateway_to_master > 3 * lat.bytes_gateway_to_master
    assert lat.mean_response_ms < acc.mean_response_ms


def test_master_side_rescale_keeps_gateway_bytes():
    base = dict(duration_s=60, payload=PayloadSpec(width=400, height=300), mode=Mode.LOW_LATENCY)
    master_side = build_report(run_simulation(scenario([fog()], **base)))
    client_side = build_report(run_simulation(scenario([fog()], client_rescale=True, **base)))
    assert master_side.bytes_gateway_to_master > client_side.bytes_gateway_to_master
    assert master_side.bytes_master_to_worker == pytest.approx(client_side.bytes_master_to_worker, rel=0.01)


def test_tensorfile_worker_and_map(tmp_path):
    fixtures = tmp_path / "fx"
    fixtures.mkdir()
    truth = tmp_path / "gt.jsonl"
    lines = []
    for k in range(10):
        box = BoundingBox(0.3, 0.4, 0.2, 0.2)
        write_grid(encode([Detection(box, k % 3, 0.9)], GridSpec(7, 20)), fixtures / f"img{k:05d}.grid")
        lines.append(f'{{"image_id":"img{k:05d}","annotations":[{{"class_id":{k % 3},"cx":0.3,"cy":0.4,"w":0.2,"h":0.2}}]}}')
    truth.write_text("\n".join(lines) + "\n")
    w = WorkerSpec("fog-1", "fog", "tensorfile", fixed(50), LAN, fixtures=fixtures)
    report = build_report(run_simulation(scenario([w], duration_s=60, ground_truth=truth)))
    assert report.completed == 10
    assert report.map == 1.0


def test_missing_fixture_counts_attempts(tmp_path):
    w = WorkerSpec("fog-1", "fog", "tensorfile", fixed(50), LAN, fixtures=tmp_path)
    sc = scenario([w], duration_s=6)
    sc = sc.with_(master=sc.master.__class__(max_attempts=3))
    result = run_simulation(sc)
    (rec,) = result.clients.values()
    assert rec.status == 502
    dispatches = [t for t in result.transitions if t.to_state == "Dispatched"]
    assert [t.attempt for t in dispatches] == [1, 2, 3]


def test_missing_fixture_directory_fails_before_running(tmp_path):
    w = WorkerSpec("fog-1", "fog", "tensorfile", fixed(50), LAN, fixtures=tmp_path / "absent")
    with pytest.raises(ScenarioError, match="does not exist"):
        run_simulation(scenario([w]))


def test_energy_in_report():
    one = build_report(run_simulation(scenario([fog(power=PowerSpec(12, 15))], duration_s=60)))
    assert one.energy_fog_j == pytest.approx(12 * 60 + 3 * 10 * 0.1)


# -- reports and comparisons -----------------------------------------------


def test_compare_identical_runs_all_zero_delta():
    sc = scenario([fog()], duration_s=60)
    a, b = build_report(run_simulation(sc)), build_report(run_simulation(sc))
    rows = compare_reports([a, b])
    assert all(r.delta in (0, 0.0, None) for r in rows)


def test_compare_fog_vs_cloud_consistent():
    f = build_report(run_simulation(scenario([fog()], duration_s=120, name="fog")))
    c = build_report(run_simulation(scenario(
        [WorkerSpec("cloud-1", "cloud", "mock", fixed(100), WAN_NEAR, canned=(DET,))], duration_s=120, name="cloud")))
    rows = {r.metric: r for r in compare_reports([f, c])}
    assert rows["mean_response_ms"].status == "consistent"
    assert rows["mean_response_ms"].expected == "a<b"


def test_compare_modes_bandwidth_consistent():
    base = dict(duration_s=60, payload=PayloadSpec(width=400, height=300))
    hi = build_report(run_simulation(scenario([fog()], mode=Mode.HIGH_ACCURACY, name="hi", **base)))
    lo = build_report(run_simulation(scenario([fog()], mode=Mode.LOW_LATENCY, client_rescale=True, name="lo", **base)))
    rows = {r.metric: r for r in compare_reports([hi, lo])}
    assert rows["bytes_gateway_to_master"].status == "consistent"
    assert rows["mean_response_ms"].status == "consistent"


def test_compare_needs_two():
    with pytest.raises(ValueError):
        compare_reports([])


def test_report_csv_round_trip_and_figures(tmp_path, fog1_run):
    report = build_report(fog1_run)
    write_reports_csv([report], tmp_path / "r.csv")
    assert read_reports_csv(tmp_path / "r.csv") == [report]
    files = render_figures([report], tmp_path / "figs")
    assert files
    assert all(p.suffix == ".png" and p.stat().st_size > 0 for p in files)


# -- scenario files --------------------------------------------------------


SCENARIO_TOML = """
name = "fog1"
mode = "latency"
rate_per_min = 12
duration_s = 30
seed = 4
client_rescale = true
ground_truth = "gt.jsonl"

[payload]
width = 400
height = 300

[master]
max_attempts = 2
power = { idle_watts = 8, busy_watts = 8 }

[[workers]]
id = "fog-1"
tier = "fog"
detector = "tensorfile"
fixtures = "fx"
latency = "uniform:100:50"
link = { latency_ms = 2, bandwidth_bytes_per_s = 12500000 }
power = { idle_watts = 12, busy_watts = 15 }

[[faults]]
worker = "fog-1"
kind = "stall"
at_s = 5
duration_s = 3
"""


def test_load_scenario(tmp_path):
    path = tmp_path / "s.toml"
    path.write_text(SCENARIO_TOML)
    sc = load_scenario(path)
    assert sc.name == "fog1"
    assert sc.mode is Mode.LOW_LATENCY
    assert sc.rate_per_min == 12
    assert sc.master.max_attempts == 2
    assert sc.payload == PayloadSpec(400, 300)
    (w,) = sc.workers
    assert w.fixtures == tmp_path / "fx"
    assert w.latency == LatencyModel("uniform", 100, 50, 4)
    assert w.power == PowerSpec(12, 15)
    assert sc.faults == (FaultSpec("fog-1", "stall", 5, 3),)
    assert sc.ground_truth == tmp_path / "gt.jsonl"
    assert sc.topology == "fog x1"


@pytest.mark.parametrize(
    "text,match",
    [
        ('[[workers]]\ntier = "fog"\n', "missing"),
        ('rate_per_min = 0\n', "rate"),
        ('mode = "turbo"\n', "turbo"),
        ('[[workers]]\nid = "a"\ntier = "edge"\n', "tier"),
        ('[[workers]]\nid = "a"\ndetector = "tensorfile"\n', "fixtures"),
        ('[[workers]]\nid = "a"\n[[workers]]\nid = "a"\n', "unique"),
        ('[[workers]]\nid = "a"\n[[faults]]\nworker = "b"\nkind = "kill"\nat_s = 1\n', "unknown worker"),
        ('[[workers]]\nid = "a"\n[[faults]]\nworker = "a"\nkind = "stall"\nat_s = 1\n', "duration"),
        ('[[workers]]\nid = "a"\nlatency = "gauss:1"\n', "latency"),
        ('[payload]\nwidth = 4\n', "payload"),
    ],
)
def test_scenario_errors(tmp_path, text, match):
    path = tmp_path / "bad.toml"
    path.write_text(text)
    with pytest.raises(ScenarioError, match=match):
        load_scenario(path)

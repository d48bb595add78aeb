import random

import pytest
from hypothesis import given
from hypothesis import strategies as st

from fogdetect.detection import BoundingBox, Detection, GridSpec
from fogdetect.harness.corpus import PERFECT, build_corpus
from fogdetect.metrics import (
    Completion,
    Direction,
    GroundTruth,
    MetricError,
    PowerSpec,
    RunLedger,
    average_precision,
    bandwidth,
    energy,
    evaluate_map,
    fpm,
    jitter,
    load_ground_truth,
    match_detections,
    mean_ap,
    save_ground_truth,
)
from fogdetect.worker import TensorFileDetector

from oracles import exhaustive_match, oracle_map, step_sum_ap

BOX = BoundingBox(0.5, 0.5, 0.2, 0.2)


# -- matching --------------------------------------------------------------


def test_match_exact_hit():
    assert match_detections([Detection(BOX, 0, 0.9)], [BOX]) == ([True], 1)


def test_match_second_identical_detection_is_fp():
    dets = [Detection(BOX, 0, 0.9), Detection(BOX, 0, 0.8)]
    assert match_detections(dets, [BOX]) == ([True, False], 1)


def test_match_flags_follow_score_order():
    far = BoundingBox(0.1, 0.1, 0.05, 0.05)
    dets = [Detection(far, 0, 0.3), Detection(BOX, 0, 0.9)]
    assert match_detections(dets, [BOX]) == ([True, False], 1)


def random_box(rng, grid=10):
    # coarse coordinates produce frequent exact IoU ties
    cx, cy = rng.randrange(1, grid) / grid, rng.randrange(1, grid) / grid
    w, h = rng.randrange(1, grid // 2) / grid, rng.randrange(1, grid // 2) / grid
    return BoundingBox(cx, cy, w, h)


@pytest.mark.parametrize("seed", range(300))
def test_match_equals_exhaustive_oracle(seed):
    rng = random.Random(seed)
    gts = [random_box(rng) for _ in range(rng.randint(0, 3))]
    dets = []
    for _ in range(rng.randint(0, 5)):
        if gts and rng.random() < 0.6:
            g = rng.choice(gts)
            box = BoundingBox(g.cx + rng.choice((0, 0.02, -0.03)), g.cy, g.w, g.h * rng.choice((1, 1.2)))
        else:
            box = random_box(rng)
        dets.append(Detection(box, 0, rng.choice((0.5, 0.6, 0.7, 0.8))))
    threshold = rng.choice((0.3, 0.5, 0.7))
    flags, n_gt = match_detections(dets, gts, threshold)
    assert n_gt == len(gts)
    assert flags == exhaustive_match(dets, gts, threshold)


# -- AP / mAP --------------------------------------------------------------


@pytest.mark.parametrize(
    "flags,expected",
    [([True], 1.0), ([False, True], 0.5), ([True, False], 1.0)],
)
def test_ap_pinned_examples(flags, expected):
    assert average_precision(flags, 1) == pytest.approx(expected, abs=1e-12)
    assert step_sum_ap(flags, 1) == pytest.approx(expected, abs=1e-12)


def test_ap_undefined_and_zero():
    assert average_precision([], 0) is None
    assert average_precision([False, False], 0) == 0.0
    assert average_precision([], 3) == 0.0


@given(st.lists(st.booleans(), max_size=30), st.integers(0, 10))
def test_ap_matches_step_sum_oracle(flags, extra):
    n_gt = sum(flags) + extra
    if n_gt == 0:
        return
    ap = average_precision(flags, n_gt)
    assert 0.0 <= ap <= 1.0
    assert ap == pytest.approx(step_sum_ap(flags, n_gt), abs=1e-12)


@given(st.lists(st.booleans(), min_size=1, max_size=30), st.data())
def test_ap_monotone_when_fp_becomes_tp(flags, data):
    fps = [i for i, f in enumerate(flags) if not f]
    if not fps:
        return
    i = data.draw(st.sampled_from(fps))
    n_gt = sum(flags) + 1
    flipped = list(flags)
    flipped[i] = True
    assert average_precision(flipped, n_gt) >= average_precision(flags, n_gt) - 1e-12


def test_mean_ap_examples():
    assert mean_ap([1.0]) == 1.0
    assert mean_ap({0: 1.0, 1: 0.5}) == 0.75
    assert mean_ap({0: 0.4, 1: None}) == 0.4
    with pytest.raises(MetricError):
        mean_ap({0: None})
    with pytest.raises(MetricError):
        mean_ap([])


@given(st.floats(0, 1), st.integers(1, 20))
def test_mean_ap_of_identical_values(v, n):
    assert mean_ap([v] * n) == v


def synthetic_case(rng, n_images=8, n_classes=4):
    truths, dets = {}, {}
    for k in range(n_images):
        img = f"i{k}"
        anns = tuple((rng.randrange(n_classes), random_box(rng)) for _ in range(rng.randint(0, 3)))
        truths[img] = GroundTruth(img, anns)
        out = []
        for c, b in anns:
            if rng.random() < 0.8:
                out.append(Detection(BoundingBox(b.cx + rng.uniform(-0.05, 0.05), b.cy, b.w, b.h), c, rng.random()))
        for _ in range(rng.randint(0, 2)):
            out.append(Detection(random_box(rng), rng.randrange(n_classes), rng.random()))
        dets[img] = out
    return dets, truths


@pytest.mark.parametrize("seed", range(40))
def test_map_equals_oracle_pipeline(seed):
    dets, truths = synthetic_case(random.Random(seed))
    if not any(gt.annotations for gt in truths.values()) and not any(dets.values()):
        pytest.skip("empty draw")
    value, per_class = evaluate_map(dets, truths)
    assert value == pytest.approx(oracle_map(dets, truths), abs=1e-12)
    assert all(v is None or 0.0 <= v <= 1.0 for v in per_class.values())


def test_perfect_corpus_map_is_exactly_one(tmp_path):
    spec = GridSpec(7, 20)
    paths = build_corpus(tmp_path, 300, seed=3, spec=spec, qualities={"perfect": PERFECT})
    truths = load_ground_truth(paths["ground_truth"])
    detector = TensorFileDetector(paths["perfect"])
    dets = {img: detector.tensor_file_detect(img) for img in truths}
    value, per_class = evaluate_map(dets, truths)
    assert value == 1.0
    assert len([c for c, v in per_class.items() if v is not None]) == 20


def test_ground_truth_round_trip(tmp_path):
    truths = [GroundTruth("a", ((3, BOX),)), GroundTruth("b", ())]
    save_ground_truth(truths, tmp_path / "gt.jsonl")
    assert list(load_ground_truth(tmp_path / "gt.jsonl").values()) == truths
    d = tmp_path / "dir"
    d.mkdir()
    (d / "a.json").write_text('{"image_id":"a","annotations":[{"class_id":3,"cx":0.5,"cy":0.5,"w":0.2,"h":0.2}]}')
    assert load_ground_truth(d)["a"] == truths[0]


def test_ground_truth_rejects_out_of_range():
    with pytest.raises(ValueError):
        GroundTruth.from_dict({"image_id": "x", "annotations": [{"class_id": 0, "cx": 1.5, "cy": 0, "w": 0, "h": 0}]})


# -- FPM and jitter --------------------------------------------------------


def test_fpm_examples():
    assert fpm([i * 6.0 for i in range(10)], 60) == 10.0
    assert fpm([], 60) == 0.0
    assert fpm([i * 6.0 for i in range(25)], 150) == 10.0
    assert fpm([100.0, 1.0, 111.0], 60, start_s=50) == 1.0
    with pytest.raises(MetricError):
        fpm([1.0], 0)


def test_jitter_examples():
    assert jitter([100, 100, 100]) == 0
    assert jitter([100, 200, 100]) == 100
    for bad in ([], [5.0]):
        with pytest.raises(MetricError):
            jitter(bad)


finite = st.floats(0, 1e4, allow_nan=False)


@given(st.lists(finite, min_size=2, max_size=50), st.floats(-1e3, 1e3))
def test_jitter_shift_invariant(xs, c):
    assert jitter([x + c for x in xs]) == pytest.approx(jitter(xs), abs=1e-6)


@given(st.lists(finite, min_size=2, max_size=50), st.floats(0, 100))
def test_jitter_scales_linearly(xs, k):
    assert jitter([x * k for x in xs]) == pytest.approx(k * jitter(xs), rel=1e-9, abs=1e-9)


def test_jitter_of_uniform_latency_run():
    from fogdetect.worker import LatencyModel

    model = LatencyModel.parse("uniform:80:40", seed=9)
    run = [model.latency_ms(f"img{i}") for i in range(100)]
    again = [LatencyModel.parse("uniform:80:40", seed=9).latency_ms(f"img{i}") for i in range(100)]
    j = jitter(run)
    assert 40 / 4 <= j <= 40
    assert jitter(again) == j


# -- bandwidth and ledger --------------------------------------------------


def ten_messages():
    ledger = RunLedger()
    for i in range(10):
        ledger.record(f"t{i}", f"i{i}", Direction.GATEWAY_TO_MASTER, 1000 + 64, i * 6_000_000, i * 6_000_000 + 500)
    return ledger


def test_bandwidth_sums_payload_and_header():
    summary = bandwidth(ten_messages(), Direction.GATEWAY_TO_MASTER, duration_s=60)
    assert summary.total_bytes == 10_640
    assert summary.bytes_per_minute == 10_640
    assert summary.messages == 10


def test_bandwidth_empty_filter_is_error():
    with pytest.raises(MetricError):
        bandwidth(ten_messages(), Direction.MASTER_TO_WORKER)
    with pytest.raises(MetricError):
        bandwidth(RunLedger())


def test_ledger_rejects_time_travel():
    with pytest.raises(ValueError):
        RunLedger().record("t", "i", Direction.MASTER_TO_WORKER, 1, 10, 9)


def test_ledger_csv_round_trip_reproduces_bandwidth(tmp_path):
    rng = random.Random(2)
    ledger = RunLedger()
    for i in range(200):
        send = rng.randrange(10**9)
        ledger.record(f"t{i}", f"i{i % 37}", rng.choice(list(Direction)), rng.randrange(1, 10**6), send,
                      send + rng.randrange(10**6))
        ledger.completions.append(Completion(f"t{i}", f"i{i}", "w1", 200, send, send + 5, rng.random() * 100))
    ledger.write_csv(tmp_path / "ledger.csv")
    ledger.write_completions_csv(tmp_path / "done.csv")
    back = RunLedger.read_csv(tmp_path / "ledger.csv", tmp_path / "done.csv")
    assert back == ledger
    for d in Direction:
        assert bandwidth(back, d) == bandwidth(ledger, d)
    assert (tmp_path / "ledger.csv").read_text().splitlines()[0] == "task_id,image_id,direction,bytes,send_time_us,recv_time_us"


def test_response_times_from_ledger():
    ledger = RunLedger()
    ledger.record("t1", "a", Direction.GATEWAY_TO_MASTER, 10, 0, 1000)
    ledger.record("t1", "a", Direction.MASTER_TO_GATEWAY, 10, 4000, 5000)
    ledger.record("t2", "b", Direction.GATEWAY_TO_MASTER, 10, 100, 1000)  # never answered
    assert ledger.response_times_ms() == [(5000, "a", 5.0)]


# -- energy ----------------------------------------------------------------


def test_energy_examples():
    spec = {"n": PowerSpec(5, 10)}
    assert energy({}, spec, 60) == ({"n": 300.0}, 300.0)
    assert energy({"n": [(0, 60)]}, spec, 60) == ({"n": 600.0}, 600.0)


def test_energy_overlaps_count_once_and_clip():
    spec = {"n": PowerSpec(0, 1)}
    per_node, _ = energy({"n": [(0, 10), (5, 15), (50, 80)]}, spec, 60)
    assert per_node["n"] == 25.0


def test_two_nodes_double_energy_at_equal_profile():
    spec = PowerSpec(12, 15)
    busy = [(i * 6.0, i * 6.0 + 2.0) for i in range(10)]
    one, _ = energy({"f1": busy}, {"f1": spec}, 60)
    two, total = energy({"f1": busy, "f2": busy}, {"f1": spec, "f2": spec}, 60)
    assert total == 2 * one["f1"]


def test_power_spec_validation():
    with pytest.raises(ValueError):
        PowerSpec(10, 5)
    with pytest.raises(ValueError):
        PowerSpec(-1, 5)
    with pytest.raises(MetricError):
        energy({}, {"n": PowerSpec(1, 2)}, -1)

"""Metrics reports: assembly from a run, CSV round trip, pairwise comparison, figures."""

from __future__ import annotations

import csv
import statistics
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Iterable, Sequence

from ..metrics import (
    Direction,
    MetricError,
    bandwidth,
    energy,
    evaluate_map,
    fpm,
    jitter,
    load_ground_truth,
)
from .sim import SimResult

US = 1_000_000


@dataclass(frozen=True)
class MetricsReport:
    scenario: str
    topology: str
    mode: str
    n_fog: int
    n_cloud: int
    worker_link_ms: float
    payload: str
    submitted: int
    completed: int
    failed: int
    timeouts: int
    fpm: float
    mean_response_ms: float | None
    median_response_ms: float | None
    max_response_ms: float | None
    jitter_ms: float | None
    mean_compute_ms: float | None
    max_service_ms: float | None
    bytes_gateway_to_master: int
    bytes_master_to_worker: int
    bytes_worker_to_master: int
    bytes_master_to_gateway: int
    gateway_bytes_per_min: float
    control_bytes: int
    energy_total_j: float
    energy_fog_j: float
    energy_cloud_j: float
    energy_master_j: float
    map: float | None
    duplicates_dropped: int

    @property
    def key(self) -> str:
        return f"{self.topology}@{self.worker_link_ms:g}ms"


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return f"{value:.6f}"
    return str(value)


REPORT_COLUMNS = tuple(f.name for f in fields(MetricsReport))


def build_report(result: SimResult) -> MetricsReport:
    sc = result.scenario
    ledger = result.ledger
    duration = sc.duration_s
    ok = [c for c in ledger.completions if c.status == 200]
    timeouts = sum(1 for c in ledger.completions if c.status == 504)
    failed = sum(1 for c in ledger.completions if c.status not in (200, 504))

    responses = [ms for _, img, ms in ledger.response_times_ms() if result.clients[img].status == 200]
    completion_times = [t / US for t, img, _ in ledger.response_times_ms() if result.clients[img].status == 200]
    try:
        jit = jitter(responses)
    except MetricError:
        jit = None

    service = []
    tasks_dispatch = {}
    for tr in result.transitions:
        if tr.to_state == "Dispatched":
            tasks_dispatch[tr.task_id] = tr.time_us
    for c in ok:
        if c.task_id in tasks_dispatch:
            service.append((c.done_time_us - tasks_dispatch[c.task_id]) / 1000)

    def dir_bytes(d: Direction) -> int:
        try:
            return bandwidth(ledger, d).total_bytes
        except MetricError:
            return 0

    g2m_rate = 0.0
    if duration > 0:
        try:
            g2m_rate = bandwidth(ledger, Direction.GATEWAY_TO_MASTER, duration_s=duration).bytes_per_minute
        except MetricError:
            g2m_rate = 0.0

    power = {"master": sc.master_power}
    tiers = {"master": "master"}
    for w in sc.workers:
        power[w.worker_id] = w.power
        tiers[w.worker_id] = w.tier
    per_node, total = energy(result.busy, power, duration)

    map_value = None
    if sc.ground_truth is not None:
        truths = load_ground_truth(sc.ground_truth)
        dets = result.detections_by_image()
        subset = {img: truths[img] for img in dets if img in truths}
        if subset:
            try:
                map_value, _ = evaluate_map(dets, subset)
            except MetricError:
                map_value = None

    return MetricsReport(
        scenario=sc.name,
        topology=sc.topology,
        mode=sc.mode.value,
        n_fog=sum(w.tier == "fog" for w in sc.workers),
        n_cloud=sum(w.tier == "cloud" for w in sc.workers),
        worker_link_ms=max((w.link.latency_ms for w in sc.workers), default=0.0),
        payload=sc.payload.describe(),
        submitted=len(result.clients),
        completed=len(ok),
        failed=failed,
        timeouts=timeouts,
        fpm=fpm(completion_times, duration) if duration > 0 else 0.0,
        mean_response_ms=statistics.fmean(responses) if responses else None,
        median_response_ms=statistics.median(responses) if responses else None,
        max_response_ms=max(responses) if responses else None,
        jitter_ms=jit,
        mean_compute_ms=statistics.fmean(c.compute_ms for c in ok) if ok else None,
        max_service_ms=max(service) if service else None,
        bytes_gateway_to_master=dir_bytes(Direction.GATEWAY_TO_MASTER),
        bytes_master_to_worker=dir_bytes(Direction.MASTER_TO_WORKER),
        bytes_worker_to_master=dir_bytes(Direction.WORKER_TO_MASTER),
        bytes_master_to_gateway=dir_bytes(Direction.MASTER_TO_GATEWAY),
        gateway_bytes_per_min=g2m_rate,
        control_bytes=sum(result.control_bytes.values()),
        energy_total_j=total,
        energy_fog_j=sum(v for k, v in per_node.items() if tiers[k] == "fog"),
        energy_cloud_j=sum(v for k, v in per_node.items() if tiers[k] == "cloud"),
        energy_master_j=per_node["master"],
        map=map_value,
        duplicates_dropped=result.duplicates_dropped,
    )


def write_reports_csv(reports: Iterable[MetricsReport], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for r in reports:
            w.writerow([_fmt(getattr(r, c)) for c in REPORT_COLUMNS])


def read_reports_csv(path: str | Path) -> list[MetricsReport]:
    kinds = {f.name: f.type for f in fields(MetricsReport)}
    out = []
    with open(path, encoding="utf-8", newline="") as fh:
        for row in csv.DictReader(fh):
            values = {}
            for name in REPORT_COLUMNS:
                kind = kinds[name]
                text = row[name]
                if kind == "str":
                    values[name] = text
                elif kind == "int":
                    values[name] = int(text)
                else:
                    values[name] = None if text == "" else float(text)
            out.append(MetricsReport(**values))
    return out


def summary_text(report: MetricsReport) -> str:
    def ms(v):
        return "n/a" if v is None else f"{v:.1f} ms"

    lines = [
        f"scenario {report.scenario} ({report.topology}, {report.mode} mode, payload {report.payload})",
        f"  tasks      submitted={report.submitted} completed={report.completed} "
        f"failed={report.failed} timeouts={report.timeouts}",
        f"  FPM        {report.fpm:.2f}",
        f"  response   mean={ms(report.mean_response_ms)} median={ms(report.median_response_ms)} "
        f"max={ms(report.max_response_ms)}",
        f"  jitter     {ms(report.jitter_ms)}",
        f"  compute    mean={ms(report.mean_compute_ms)}",
        f"  bandwidth  gateway->master {report.bytes_gateway_to_master} B "
        f"({report.gateway_bytes_per_min:.0f} B/min), master->worker {report.bytes_master_to_worker} B",
        f"  energy     total={report.energy_total_j:.1f} J fog={report.energy_fog_j:.1f} J "
        f"cloud={report.energy_cloud_j:.1f} J",
    ]
    if report.map is not None:
        lines.append(f"  mAP@0.5    {report.map:.4f}")
    return "\n".join(lines)


# -- comparisons -----------------------------------------------------------


@dataclass(frozen=True)
class Comparison:
    metric: str
    a: str
    b: str
    value_a: float | None
    value_b: float | None
    delta: float | None
    expected: str
    status: str


def _relation(va, vb, expected: str) -> str:
    if va is None or vb is None:
        return "n/a"
    ok = {
        "a<b": va < vb,
        "a<=b": va <= vb,
        "a>b": va > vb,
    }.get(expected)
    if ok is None:
        return "n/a"
    return "consistent" if ok else "contradicts"


def _expectations(a: MetricsReport, b: MetricsReport) -> dict[str, str]:
    """Orderings the reference evaluation reports between two runs, keyed by metric."""
    exp: dict[str, str] = {}
    a_fog_only = a.n_cloud == 0 and a.n_fog > 0
    b_fog_only = b.n_cloud == 0 and b.n_fog > 0
    if a.mode == b.mode:
        if a_fog_only and b.n_cloud > 0:
            exp.update(mean_response_ms="a<b", jitter_ms="a<b", energy_total_j="a<b")
        elif b_fog_only and a.n_cloud > 0:
            exp.update(mean_response_ms="a>b", jitter_ms="a>b", energy_total_j="a>b")
        elif a_fog_only and b_fog_only and a.n_fog != b.n_fog:
            # more fog nodes: no slower, no jumpier, energy scales with node count
            order = "a<=b" if a.n_fog > b.n_fog else "b<=a"
            exp.update(mean_response_ms=order, jitter_ms=order, energy_fog_j="proportional")
        elif a.n_cloud > 0 and b.n_cloud > 0 and a.topology == b.topology and a.worker_link_ms != b.worker_link_ms:
            exp["mean_response_ms"] = "a<b" if a.worker_link_ms < b.worker_link_ms else "a>b"
    elif a.key == b.key:
        lo, hi = ("a", "b") if a.mode == "latency" else ("b", "a")
        exp["mean_response_ms"] = f"{lo}<{hi}"
        exp["bytes_gateway_to_master"] = f"{lo}<{hi}"
    return exp


def compare_pair(a: MetricsReport, b: MetricsReport) -> list[Comparison]:
    exp = _expectations(a, b)
    rows = []
    for metric in ("mean_response_ms", "jitter_ms", "bytes_gateway_to_master", "energy_total_j", "energy_fog_j",
                   "fpm", "map"):
        va, vb = getattr(a, metric), getattr(b, metric)
        delta = None if va is None or vb is None else vb - va
        expected = exp.get(metric, "")
        if expected == "b<a":
            status = _relation(vb, va, "a<b")
        elif expected == "b<=a":
            status = _relation(vb, va, "a<=b")
        elif expected == "a>b":
            status = _relation(va, vb, "a>b")
        elif expected == "proportional":
            if not va or not vb:
                status = "n/a"
            else:
                want = a.n_fog / b.n_fog
                status = "consistent" if abs(va / vb - want) <= 0.1 * want else "contradicts"
        elif expected:
            status = _relation(va, vb, expected)
        else:
            status = "n/a"
        rows.append(Comparison(metric, a.scenario, b.scenario, va, vb, delta, expected or "-", status))
    return rows


def compare_reports(reports: Sequence[MetricsReport]) -> list[Comparison]:
    if len(reports) < 2:
        raise ValueError("need at least two reports to compare")
    rows = []
    for i in range(len(reports)):
        for j in range(i + 1, len(reports)):
            rows.extend(compare_pair(reports[i], reports[j]))
    return rows


def write_comparisons_csv(rows: Iterable[Comparison], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        cols = [f.name for f in fields(Comparison)]
        w.writerow(cols)
        for r in rows:
            w.writerow([_fmt(v) for v in asdict(r).values()])


# -- figures ---------------------------------------------------------------

FIGURE_METRICS = (
    ("mean_response_ms", "Mean response time (ms)", "response_time"),
    ("jitter_ms", "Jitter (ms)", "jitter"),
    ("gateway_bytes_per_min", "Gateway to master (bytes/min)", "bandwidth"),
    ("energy_total_j", "Modeled energy (J)", "energy"),
    ("fpm", "Frames per minute", "fpm"),
    ("map", "mAP@0.5", "map"),
)


def render_figures(reports: Sequence[MetricsReport], out_dir: str | Path) -> list[Path]:
    """One grouped bar chart per metric: topologies on the x axis, one bar per mode."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    keys = list(dict.fromkeys(r.scenario.rsplit("-", 1)[0] for r in reports))
    modes = list(dict.fromkeys(r.mode for r in reports))
    lookup = {(r.scenario.rsplit("-", 1)[0], r.mode): r for r in reports}
    written = []
    width = 0.8 / max(1, len(modes))
    for attr, label, stem in FIGURE_METRICS:
        if all(getattr(r, attr) is None for r in reports):
            continue
        fig, ax = plt.subplots(figsize=(6.4, 3.6))
        for m_idx, mode in enumerate(modes):
            xs, ys = [], []
            for k_idx, key in enumerate(keys):
                r = lookup.get((key, mode))
                value = None if r is None else getattr(r, attr)
                if value is None:
                    continue
                xs.append(k_idx + (m_idx - (len(modes) - 1) / 2) * width)
                ys.append(value)
            ax.bar(xs, ys, width=width, label=mode)
        ax.set_xticks(range(len(keys)))
        ax.set_xticklabels(keys)
        ax.set_ylabel(label)
        ax.legend(frameon=False)
        ax.spines["top"].set_visible(False)
        ax.spines["right"].set_visible(False)
        fig.tight_layout()
        path = out_dir / f"{stem}.png"
        fig.savefig(path, dpi=120, metadata={"Software": None})
        plt.close(fig)
        written.append(path)
    return written

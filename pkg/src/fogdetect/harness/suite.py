"""The default scenario matrix: four topologies in both modes, plus its ordering checks.

Topologies are fog x1 and fog x2 on a LAN (2 ms, 100 Mbit/s) and a single cloud
VM over a near (50 ms, 20 Mbit/s) or far (150 ms, 20 Mbit/s) WAN link. The gateway
always sits on the LAN. All parameters below are declared harness choices.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

from ..metrics import PowerSpec
from ..preprocess import Mode
from ..worker.detectors import LatencyModel
from .clock import LAN, WAN_FAR, WAN_NEAR, LinkModel
from .corpus import build_corpus
from .report import (
    Comparison,
    MetricsReport,
    build_report,
    compare_reports,
    render_figures,
    summary_text,
    write_comparisons_csv,
    write_reports_csv,
)
from .scenario import PayloadSpec, Scenario, WorkerSpec
from .sim import SimResult, run_simulation

DEFAULT_SEED = 7

TOPOLOGIES: dict[str, tuple[tuple[str, str, LinkModel], ...]] = {
    "fog1": (("fog-1", "fog", LAN),),
    "fog2": (("fog-1", "fog", LAN), ("fog-2", "fog", LAN)),
    "cloud-near": (("cloud-1", "cloud", WAN_NEAR),),
    "cloud-far": (("cloud-1", "cloud", WAN_FAR),),
}

# a raw 4000x2192 capture as sent in high-accuracy mode, and its 200x110 rescale
PAYLOADS = {
    Mode.HIGH_ACCURACY: PayloadSpec(4000, 2192, declared_bytes=943_718),
    Mode.LOW_LATENCY: PayloadSpec(200, 110, declared_bytes=4_956),
}

# detector latency per tier and mode; the cloud VM is slower and noisier
COMPUTE = {
    ("fog", Mode.HIGH_ACCURACY): "uniform:3000:2000",
    ("fog", Mode.LOW_LATENCY): "uniform:200:100",
    ("cloud", Mode.HIGH_ACCURACY): "uniform:3000:2300",
    ("cloud", Mode.LOW_LATENCY): "uniform:250:150",
}

POWER = {
    "fog": PowerSpec(12.0, 15.0),
    "cloud": PowerSpec(60.0, 90.0),
}
MASTER_POWER = PowerSpec(8.0, 8.0)


def suite_scenarios(
    corpus: dict[str, Path] | None = None,
    seed: int = DEFAULT_SEED,
    rate_per_min: float = 10.0,
    duration_s: float = 600.0,
) -> list[Scenario]:
    """Without a corpus the workers run mock detectors and no mAP is computed."""
    out = []
    for mode in (Mode.HIGH_ACCURACY, Mode.LOW_LATENCY):
        for topo, nodes in TOPOLOGIES.items():
            workers = []
            for worker_id, tier, link in nodes:
                fixtures = corpus[mode.value] if corpus else None
                workers.append(
                    WorkerSpec(
                        worker_id=worker_id,
                        tier=tier,
                        detector="tensorfile" if fixtures else "mock",
                        latency=LatencyModel.parse(COMPUTE[tier, mode], seed=seed),
                        link=link,
                        fixtures=fixtures,
                        power=POWER[tier],
                    )
                )
            out.append(
                Scenario(
                    name=f"{topo}-{mode.value}",
                    workers=tuple(workers),
                    mode=mode,
                    rate_per_min=rate_per_min,
                    duration_s=duration_s,
                    payload=PAYLOADS[mode],
                    client_link=LAN,
                    client_rescale=mode is Mode.LOW_LATENCY,
                    master_power=MASTER_POWER,
                    seed=seed,
                    ground_truth=corpus["ground_truth"] if corpus else None,
                )
            )
    return out


@dataclass(frozen=True)
class Check:
    name: str
    detail: str
    passed: bool

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'}  {self.name}: {self.detail}"


def _fmt(v: float | None) -> str:
    return "n/a" if v is None else f"{v:.3f}"


def ordering_checks(reports: Sequence[MetricsReport]) -> list[Check]:
    """Qualitative findings the matrix must reproduce, one check per relation."""
    by = {r.scenario: r for r in reports}
    checks: list[Check] = []

    def get(topo: str, mode: Mode) -> MetricsReport | None:
        return by.get(f"{topo}-{mode.value}")

    def relate(name: str, a: MetricsReport, b: MetricsReport, attr: str, strict: bool) -> None:
        va, vb = getattr(a, attr), getattr(b, attr)
        ok = va is not None and vb is not None and (va < vb if strict else va <= vb)
        op = "<" if strict else "<="
        checks.append(Check(name, f"{a.scenario} {_fmt(va)} {op} {b.scenario} {_fmt(vb)}", ok))

    for mode in Mode:
        f1, f2, cn, cf = (get(t, mode) for t in ("fog1", "fog2", "cloud-near", "cloud-far"))
        if None in (f1, f2, cn, cf):
            continue
        relate(f"response {mode.value}", f2, f1, "mean_response_ms", strict=False)
        relate(f"response {mode.value}", f1, cn, "mean_response_ms", strict=True)
        relate(f"response {mode.value}", cn, cf, "mean_response_ms", strict=True)
        for fog in (f1, f2):
            for cloud in (cn, cf):
                relate(f"jitter {mode.value}", fog, cloud, "jitter_ms", strict=True)
                relate(f"energy {mode.value}", fog, cloud, "energy_total_j", strict=True)
        relate(f"jitter {mode.value}", f2, f1, "jitter_ms", strict=False)
        ratio = f2.energy_fog_j / f1.energy_fog_j if f1.energy_fog_j else float("nan")
        checks.append(Check(f"energy {mode.value}", f"fog energy {f2.scenario}/{f1.scenario} = {ratio:.4f} "
                                                    f"(want 2 within 10%)", abs(ratio - 2.0) <= 0.2))
    for topo in TOPOLOGIES:
        lo, hi = get(topo, Mode.LOW_LATENCY), get(topo, Mode.HIGH_ACCURACY)
        if lo is None or hi is None:
            continue
        relate("response by mode", lo, hi, "mean_response_ms", strict=True)
        relate("bandwidth by mode", lo, hi, "bytes_gateway_to_master", strict=True)
    return checks


@dataclass
class SuiteResult:
    reports: list[MetricsReport]
    comparisons: list[Comparison]
    checks: list[Check]
    runs: dict[str, SimResult]

    @property
    def ok(self) -> bool:
        return all(c.passed for c in self.checks) and not any(c.status == "contradicts" for c in self.comparisons)


def write_run(result: SimResult, report: MetricsReport, run_dir: Path) -> None:
    run_dir.mkdir(parents=True, exist_ok=True)
    result.ledger.write_csv(run_dir / "ledger.csv")
    result.ledger.write_completions_csv(run_dir / "completions.csv")
    with open(run_dir / "transitions.log", "w", encoding="utf-8") as fh:
        for tr in result.transitions:
            fh.write(tr.format_line() + "\n")
    write_reports_csv([report], run_dir / "report.csv")
    (run_dir / "summary.txt").write_text(summary_text(report) + "\n", encoding="utf-8")


def run_suite(
    out_dir: str | Path,
    seed: int = DEFAULT_SEED,
    rate_per_min: float = 10.0,
    duration_s: float = 600.0,
    figures: bool = True,
) -> SuiteResult:
    """Run the matrix and write per-run ledgers, report.csv, comparisons.csv, checks.txt and figures."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    n_images = len(range(int(rate_per_min * duration_s / 60) + 1))
    corpus = build_corpus(out_dir / "corpus", n_images, seed=seed)
    reports, runs = [], {}
    for scenario in suite_scenarios(corpus, seed, rate_per_min, duration_s):
        result = run_simulation(scenario)
        report = build_report(result)
        write_run(result, report, out_dir / "runs" / scenario.name)
        reports.append(report)
        runs[scenario.name] = result
    comparisons = compare_reports(reports)
    checks = ordering_checks(reports)
    write_reports_csv(reports, out_dir / "report.csv")
    write_comparisons_csv(comparisons, out_dir / "comparisons.csv")
    (out_dir / "checks.txt").write_text("".join(c.line() + "\n" for c in checks), encoding="utf-8")
    if figures:
        render_figures(reports, out_dir)
    return SuiteResult(reports, comparisons, checks, runs)

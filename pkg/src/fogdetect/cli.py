"""Command line: ``fogdetect master|worker|client|harness``."""

from __future__ import annotations

import asyncio
import csv
import logging
import sys
from pathlib import Path

import click

from .preprocess import ImageFormat, ImagePayload, Mode, PreprocessError, parse_ppm, prepare


def _setup_logging(verbose: int) -> None:
    level = logging.WARNING - 10 * verbose
    logging.basicConfig(level=max(level, logging.DEBUG), format="%(asctime)s %(name)s %(levelname)s %(message)s")


@click.group()
@click.option("-v", "--verbose", count=True, help="Repeat for more log output.")
def main(verbose: int) -> None:
    """Fog/cloud object-detection offloading: master, worker, gateway client and evaluation harness."""
    _setup_logging(verbose)


# -- master ----------------------------------------------------------------


@main.command()
@click.option("--listen-http", help="Gateway HTTP address, host:port.")
@click.option("--listen-worker", help="Worker frame address, host:port.")
@click.option("--mode-default", type=click.Choice(["accuracy", "latency"]), help="Mode when X-Mode is absent.")
@click.option("--target-long-side", type=int, help="Long side in pixels for low-latency rescaling.")
@click.option("--heartbeat-interval-ms", type=int)
@click.option("--heartbeat-timeout-intervals", type=int)
@click.option("--queue-wait-timeout-ms", type=int)
@click.option("--max-attempts", type=int)
@click.option("--max-frame-bytes", type=int)
@click.option("--transition-log", type=click.Path(dir_okay=False), help="Append task transitions here (default stderr).")
@click.option("--ledger-out", type=click.Path(dir_okay=False), help="Write the master's ledger CSV on shutdown.")
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), help="TOML settings file.")
def master(config_path, ledger_out, **flags) -> None:
    """Run the coordinator until interrupted."""
    from .master.config import MasterSettings, load_master_settings
    from .master.server import MasterServer, parse_addr

    try:
        settings = load_master_settings(config_path) if config_path else MasterSettings()
        settings = settings.merged(flags)
        config = settings.scheduler_config()
        http_addr, worker_addr = parse_addr(settings.listen_http), parse_addr(settings.listen_worker)
    except (ValueError, TypeError) as exc:
        raise click.UsageError(str(exc)) from None
    stream = open(settings.transition_log, "a", encoding="utf-8") if settings.transition_log else sys.stderr
    server = MasterServer(config, http_addr, worker_addr, settings.max_frame_bytes, transition_log=stream)

    async def serve() -> None:
        await server.start()
        click.echo(f"master: http {server.http_addr[0]}:{server.http_addr[1]}, "
                   f"workers {server.worker_addr[0]}:{server.worker_addr[1]}", err=True)
        try:
            await server.serve_forever()
        finally:
            await server.close()

    try:
        asyncio.run(serve())
    except KeyboardInterrupt:
        pass
    finally:
        if ledger_out:
            server.ledger.write_csv(ledger_out)
            server.ledger.write_completions_csv(Path(ledger_out).with_suffix(".completions.csv"))
        if stream is not sys.stderr:
            stream.close()


# -- worker ----------------------------------------------------------------


@main.command()
@click.option("--master", "master_addr", required=True, help="Master worker address, host:port.")
@click.option("--id", "worker_id", required=True)
@click.option("--tier", type=click.Choice(["fog", "cloud"]), default="fog", show_default=True)
@click.option("--detector", type=click.Choice(["mock", "tensorfile"]), default="mock", show_default=True)
@click.option("--fixtures", type=click.Path(exists=True, file_okay=False), help="Grid fixture directory.")
@click.option("--latency", default=None, help="fixed:MS or uniform:BASE:SPREAD; modeled compute time.")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--slots", type=int, default=1, show_default=True)
@click.option("--detections", type=click.Path(exists=True, dir_okay=False),
              help="JSON list of canned detections for the mock detector.")
@click.option("--score-threshold", type=float, default=None)
@click.option("--iou-threshold", type=float, default=None)
@click.option("--heartbeat-interval-ms", type=int, default=2000, show_default=True)
def worker(master_addr, worker_id, tier, detector, fixtures, latency, seed, slots, detections, score_threshold,
           iou_threshold, heartbeat_interval_ms) -> None:
    """Connect to a master and execute detection tasks."""
    import json

    from .detection import DEFAULT_IOU_THRESHOLD, DEFAULT_SCORE_THRESHOLD, Detection
    from .master.server import parse_addr
    from .worker.agent import Worker, WorkerAgent
    from .worker.detectors import LatencyModel, MockDetector, TensorFileDetector

    try:
        model = LatencyModel.parse(latency, seed=seed) if latency else None
        host, port = parse_addr(master_addr)
    except ValueError as exc:
        raise click.UsageError(str(exc)) from None
    if detector == "tensorfile":
        if not fixtures:
            raise click.UsageError("--detector tensorfile needs --fixtures")
        impl = TensorFileDetector(fixtures, score_threshold if score_threshold is not None else DEFAULT_SCORE_THRESHOLD,
                                  iou_threshold if iou_threshold is not None else DEFAULT_IOU_THRESHOLD, model)
    else:
        canned = []
        if detections:
            canned = [Detection.from_dict(d) for d in json.loads(Path(detections).read_text(encoding="utf-8"))]
        impl = MockDetector(canned, model)
    agent = WorkerAgent(Worker(worker_id, tier, impl, slots), host, port, heartbeat_interval_ms)
    try:
        asyncio.run(agent.run())
    except KeyboardInterrupt:
        pass
    except ConnectionError as exc:
        raise click.ClickException(str(exc)) from None


# -- client ----------------------------------------------------------------


def _load_image(path: str | None, declared_bytes: int | None, width: int | None, height: int | None,
                seed: int) -> ImagePayload:
    from .preprocess import synthetic_ppm

    if path:
        data = Path(path).read_bytes()
        try:
            w, h, _ = parse_ppm(data)
            return ImagePayload("", w, h, ImageFormat.PPM_P6, data)
        except PreprocessError:
            if not (width and height):
                raise click.UsageError("non-PPM images need --width and --height") from None
            return ImagePayload("", width, height, ImageFormat.OPAQUE, data)
    if declared_bytes is not None:
        return ImagePayload("", width or 1, height or 1, ImageFormat.OPAQUE, bytes(declared_bytes))
    if width and height:
        return ImagePayload("", width, height, ImageFormat.PPM_P6, synthetic_ppm(width, height, seed))
    raise click.UsageError("give --image, --declared-bytes or --width/--height")


@main.command()
@click.option("--master", "master_addr", required=True, help="Master HTTP address, host:port.")
@click.option("--mode", type=click.Choice(["accuracy", "latency"]), default="accuracy", show_default=True)
@click.option("--image", type=click.Path(exists=True, dir_okay=False), help="Image file to send (PPM or opaque).")
@click.option("--declared-bytes", type=int, help="Send an opaque zero-filled body of this size.")
@click.option("--width", type=int)
@click.option("--height", type=int)
@click.option("--client-rescale", is_flag=True, help="Rescale PPM images here instead of at the master.")
@click.option("--target-long-side", type=int, default=200, show_default=True)
@click.option("--rate", type=float, default=10.0, show_default=True, help="Images per minute.")
@click.option("--duration", type=float, default=60.0, show_default=True, help="Seconds of submissions.")
@click.option("--count", type=int, default=None, help="Send exactly this many images instead (ignores --duration).")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--prefix", default="img", show_default=True, help="Image id prefix.")
@click.option("--out", type=click.Path(dir_okay=False), help="Write per-image results as CSV.")
def client(master_addr, mode, image, declared_bytes, width, height, client_rescale, target_long_side, rate,
           duration, count, seed, prefix, out) -> None:
    """Submit images at a fixed rate and report response times."""
    from .harness.client import run_schedule
    from .harness.sim import client_inject
    from .master.server import parse_addr
    from .metrics import MetricError, jitter

    host, port = parse_addr(master_addr)
    mode_v = Mode.parse(mode)
    template = _load_image(image, declared_bytes, width, height, seed)
    prescaled = False
    if client_rescale and mode_v is Mode.LOW_LATENCY:
        if template.format is not ImageFormat.PPM_P6:
            raise click.UsageError("--client-rescale needs a PPM image")
        template = prepare(template, mode_v, target_long_side)
        prescaled = True
    if count is not None:
        duration = count * 60.0 / rate
    subs = client_inject(rate, duration, mode_v, prefix)

    def make(image_id: str):
        return ImagePayload(image_id, template.width, template.height, template.format, template.data), prescaled

    records = asyncio.run(run_schedule(host, port, subs, make))
    rows = []
    for rec in records.values():
        timing = (rec.body or {}).get("timing", {})
        rows.append([rec.image_id, rec.status, rec.sent_us, rec.recv_us, f"{rec.response_ms:.3f}",
                     timing.get("worker_id", ""), timing.get("compute_ms", ""), len(rec.detections())])
    header = ["image_id", "status", "sent_us", "recv_us", "response_ms", "worker_id", "compute_ms", "detections"]
    if out:
        with open(out, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            w.writerows(rows)
    ok = [r.response_ms for r in records.values() if r.status == 200]
    click.echo(f"{len(ok)}/{len(records)} succeeded")
    if ok:
        click.echo(f"mean response {sum(ok) / len(ok):.1f} ms")
        try:
            click.echo(f"jitter {jitter(ok):.1f} ms")
        except MetricError:
            pass
    if len(ok) != len(records):
        sys.exit(1)


# -- harness ---------------------------------------------------------------


@main.group()
def harness() -> None:
    """Deterministic scenario runs, report comparison and the default suite."""


def _write_outputs(result, report, out: Path, figures: bool) -> None:
    from .harness.report import render_figures
    from .harness.suite import write_run

    write_run(result, report, out)
    if figures:
        render_figures([report], out)


@harness.command("run")
@click.option("--scenario", "scenario_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--out", type=click.Path(file_okay=False), default=None, help="Output directory.")
@click.option("--real", is_flag=True, help="Run over loopback sockets instead of the virtual clock.")
@click.option("--figures/--no-figures", default=True, show_default=True)
def harness_run(scenario_path, out, real, figures) -> None:
    """Run one scenario file and write its ledger, report and figures."""
    from .harness.report import build_report, summary_text
    from .harness.scenario import ScenarioError, load_scenario
    from .harness.sim import run_simulation

    try:
        scenario = load_scenario(scenario_path)
        if real:
            from .harness.realnet import run_real

            result = run_real(scenario)
            click.echo(_real_summary(result))
            return
        result = run_simulation(scenario)
    except ScenarioError as exc:
        raise click.ClickException(str(exc)) from None
    report = build_report(result)
    click.echo(summary_text(report))
    if out:
        _write_outputs(result, report, Path(out), figures)


def _real_summary(result) -> str:
    ok = [r.response_ms for r in result.clients.values() if r.status == 200]
    mean = f"{sum(ok) / len(ok):.1f} ms" if ok else "n/a"
    return f"real run {result.scenario.name}: {len(ok)}/{len(result.clients)} completed, mean response {mean}"


@harness.command("compare")
@click.argument("reports", nargs=-1, required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--out", type=click.Path(dir_okay=False), help="Write comparisons CSV here.")
def harness_compare(reports, out) -> None:
    """Pairwise orderings across report CSVs; exit 1 if any contradicts the expected direction."""
    from .harness.report import compare_reports, read_reports_csv, write_comparisons_csv

    rows = [r for path in reports for r in read_reports_csv(path)]
    if len(rows) < 2:
        raise click.UsageError("need at least two reports")
    comparisons = compare_reports(rows)
    for c in comparisons:
        if c.status != "n/a" or c.delta:
            click.echo(f"{c.status:11s} {c.metric:24s} {c.a} -> {c.b}  delta={c.delta}")
    if out:
        write_comparisons_csv(comparisons, out)
    if any(c.status == "contradicts" for c in comparisons):
        sys.exit(1)


@harness.command("suite")
@click.option("--out", required=True, type=click.Path(file_okay=False))
@click.option("--seed", type=int, default=7, show_default=True)
@click.option("--rate", type=float, default=10.0, show_default=True, help="Images per minute.")
@click.option("--duration", type=float, default=600.0, show_default=True, help="Simulated seconds per run.")
@click.option("--figures/--no-figures", default=True, show_default=True)
def harness_suite(out, seed, rate, duration, figures) -> None:
    """Four topologies x two modes; exit 1 if any ordering check fails."""
    from .harness.suite import run_suite

    result = run_suite(out, seed=seed, rate_per_min=rate, duration_s=duration, figures=figures)
    for check in result.checks:
        click.echo(check.line())
    bad = [c for c in result.comparisons if c.status == "contradicts"]
    for c in bad:
        click.echo(f"FAIL  comparison {c.metric}: {c.a} vs {c.b} expected {c.expected}")
    click.echo(f"wrote {out}/report.csv, comparisons.csv, checks.txt and runs/")
    if not result.ok:
        sys.exit(1)


if __name__ == "__main__":  # pragma: no cover
    main()

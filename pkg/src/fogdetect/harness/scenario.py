"""Scenario description and its TOML file format.

Example scenario file::

    name = "fog1-accuracy"
    mode = "accuracy"            # or "latency"
    rate_per_min = 10
    duration_s = 600
    seed = 7
    client_rescale = true        # low-latency images shrink on the gateway
    target_long_side = 200
    ground_truth = "corpus/gt.jsonl"   # optional; enables mAP

    [client_link]
    latency_ms = 2
    bandwidth_bytes_per_s = 12500000

    [payload]
    declared_bytes = 943718      # opaque body of this size (width/height optional, nominal), or:
    # width = 4000
    # height = 2192              # synthetic binary PPM

    [master]
    heartbeat_interval_ms = 2000
    queue_wait_timeout_ms = 10000
    max_attempts = 5
    power = { idle_watts = 8, busy_watts = 8 }

    [[workers]]
    id = "fog-1"
    tier = "fog"
    detector = "mock"            # or "tensorfile"
    fixtures = "corpus/accuracy" # tensorfile only
    latency = "uniform:3000:2000"
    slots = 1
    link = { latency_ms = 2, bandwidth_bytes_per_s = 12500000 }
    power = { idle_watts = 15, busy_watts = 20 }

    [[faults]]
    worker = "fog-1"
    kind = "kill"                # or "stall" (needs duration_s)
    at_s = 30

Relative paths resolve against the scenario file's directory.
"""

from __future__ import annotations

import sys
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any

from ..detection import DEFAULT_IOU_THRESHOLD, DEFAULT_SCORE_THRESHOLD, Detection
from ..master.scheduler import MasterConfig
from ..metrics import PowerSpec
from ..preprocess import DEFAULT_TARGET_LONG_SIDE, Mode
from ..worker.detectors import LatencyModel
from .clock import LAN, LinkModel

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


class ScenarioError(ValueError):
    pass


@dataclass(frozen=True)
class PayloadSpec:
    width: int | None = None
    height: int | None = None
    declared_bytes: int | None = None

    # declared_bytes sends an opaque body of that size; width/height are then nominal
    def __post_init__(self):
        dims = self.width is not None and self.height is not None
        if not dims and self.declared_bytes is None:
            raise ScenarioError("payload needs width+height or declared_bytes")
        if dims and min(self.width, self.height) < 1:
            raise ScenarioError("payload dimensions must be >= 1")
        if self.declared_bytes is not None and self.declared_bytes < 0:
            raise ScenarioError("declared_bytes must be >= 0")

    def describe(self) -> str:
        if self.declared_bytes is not None:
            return f"{self.declared_bytes}B"
        return f"{self.width}x{self.height}ppm"


@dataclass(frozen=True)
class WorkerSpec:
    worker_id: str
    tier: str = "fog"
    detector: str = "mock"
    latency: LatencyModel = field(default_factory=LatencyModel)
    link: LinkModel = LAN
    fixtures: Path | None = None
    slots: int = 1
    power: PowerSpec = PowerSpec(0.0, 0.0)
    canned: tuple[Detection, ...] = ()
    score_threshold: float = DEFAULT_SCORE_THRESHOLD
    iou_threshold: float = DEFAULT_IOU_THRESHOLD

    def __post_init__(self):
        if self.tier not in ("fog", "cloud"):
            raise ScenarioError(f"worker {self.worker_id}: tier must be fog or cloud")
        if self.detector not in ("mock", "tensorfile"):
            raise ScenarioError(f"worker {self.worker_id}: detector must be mock or tensorfile")
        if self.detector == "tensorfile" and self.fixtures is None:
            raise ScenarioError(f"worker {self.worker_id}: tensorfile detector needs a fixtures directory")


@dataclass(frozen=True)
class FaultSpec:
    worker_id: str
    kind: str
    at_s: float
    duration_s: float = 0.0

    def __post_init__(self):
        if self.kind not in ("kill", "stall"):
            raise ScenarioError(f"unknown fault kind {self.kind!r}")
        if self.kind == "stall" and self.duration_s <= 0:
            raise ScenarioError("stall faults need a positive duration_s")


@dataclass(frozen=True)
class Scenario:
    name: str
    workers: tuple[WorkerSpec, ...]
    mode: Mode = Mode.HIGH_ACCURACY
    rate_per_min: float = 10.0
    duration_s: float = 600.0
    payload: PayloadSpec = PayloadSpec(declared_bytes=943_718)
    client_link: LinkModel = LAN
    client_rescale: bool = False
    target_long_side: int = DEFAULT_TARGET_LONG_SIDE
    master: MasterConfig = field(default_factory=MasterConfig)
    master_power: PowerSpec = PowerSpec(0.0, 0.0)
    seed: int = 0
    faults: tuple[FaultSpec, ...] = ()
    ground_truth: Path | None = None
    warmup_s: float = 5.0
    drain_s: float = 600.0
    image_prefix: str = "img"

    def __post_init__(self):
        if self.rate_per_min <= 0:
            raise ScenarioError("rate_per_min must be > 0")
        if self.duration_s < 0:
            raise ScenarioError("duration_s must be >= 0")
        ids = [w.worker_id for w in self.workers]
        if len(set(ids)) != len(ids):
            raise ScenarioError("worker ids must be unique")
        for f in self.faults:
            if f.worker_id not in ids:
                raise ScenarioError(f"fault refers to unknown worker {f.worker_id!r}")

    @property
    def topology(self) -> str:
        fog = sum(w.tier == "fog" for w in self.workers)
        cloud = len(self.workers) - fog
        parts = []
        if fog:
            parts.append(f"fog x{fog}")
        if cloud:
            parts.append(f"cloud x{cloud}")
        return "+".join(parts) or "none"

    def with_(self, **changes: Any) -> "Scenario":
        return replace(self, **changes)

    def check_inputs(self) -> None:
        """Fail before any event runs if referenced files are missing."""
        for w in self.workers:
            if w.detector == "tensorfile" and not Path(w.fixtures).is_dir():
                raise ScenarioError(f"worker {w.worker_id}: fixtures directory {w.fixtures} does not exist")
        if self.ground_truth is not None and not Path(self.ground_truth).exists():
            raise ScenarioError(f"ground truth {self.ground_truth} does not exist")


def _link(d: dict | None, default: LinkModel) -> LinkModel:
    if d is None:
        return default
    return LinkModel(float(d["latency_ms"]), float(d["bandwidth_bytes_per_s"]))


def _power(d: dict | None) -> PowerSpec:
    if d is None:
        return PowerSpec(0.0, 0.0)
    return PowerSpec(float(d["idle_watts"]), float(d["busy_watts"]))


def _path(value: str | None, base: Path) -> Path | None:
    if value is None:
        return None
    p = Path(value)
    return p if p.is_absolute() else base / p


def scenario_from_dict(doc: dict, base: Path = Path(".")) -> Scenario:
    try:
        seed = int(doc.get("seed", 0))
        master_doc = dict(doc.get("master", {}))
        mode = Mode.parse(doc.get("mode", "accuracy"))
        master = MasterConfig(
            heartbeat_interval_ms=int(master_doc.get("heartbeat_interval_ms", 2000)),
            heartbeat_timeout_intervals=int(master_doc.get("heartbeat_timeout_intervals", 3)),
            queue_wait_timeout_ms=int(master_doc.get("queue_wait_timeout_ms", 10_000)),
            max_attempts=int(master_doc.get("max_attempts", 5)),
            target_long_side=int(doc.get("target_long_side", DEFAULT_TARGET_LONG_SIDE)),
            mode_default=mode,
        )
        workers = []
        for w in doc.get("workers", []):
            latency = LatencyModel.parse(str(w.get("latency", "fixed:0")), seed=int(w.get("seed", seed)))
            workers.append(
                WorkerSpec(
                    worker_id=str(w["id"]),
                    tier=str(w.get("tier", "fog")),
                    detector=str(w.get("detector", "mock")),
                    latency=latency,
                    link=_link(w.get("link"), LAN),
                    fixtures=_path(w.get("fixtures"), base),
                    slots=int(w.get("slots", 1)),
                    power=_power(w.get("power")),
                    canned=tuple(Detection.from_dict(d) for d in w.get("detections", [])),
                    score_threshold=float(w.get("score_threshold", DEFAULT_SCORE_THRESHOLD)),
                    iou_threshold=float(w.get("iou_threshold", DEFAULT_IOU_THRESHOLD)),
                )
            )
        payload_doc = doc.get("payload", {"declared_bytes": 943_718})
        payload = PayloadSpec(
            width=payload_doc.get("width"),
            height=payload_doc.get("height"),
            declared_bytes=payload_doc.get("declared_bytes"),
        )
        faults = tuple(
            FaultSpec(str(f["worker"]), str(f["kind"]), float(f["at_s"]), float(f.get("duration_s", 0.0)))
            for f in doc.get("faults", [])
        )
        return Scenario(
            name=str(doc.get("name", "scenario")),
            workers=tuple(workers),
            mode=mode,
            rate_per_min=float(doc.get("rate_per_min", 10)),
            duration_s=float(doc.get("duration_s", 600)),
            payload=payload,
            client_link=_link(doc.get("client_link"), LAN),
            client_rescale=bool(doc.get("client_rescale", False)),
            target_long_side=master.target_long_side,
            master=master,
            master_power=_power(master_doc.get("power")),
            seed=seed,
            faults=faults,
            ground_truth=_path(doc.get("ground_truth"), base),
            warmup_s=float(doc.get("warmup_s", 5.0)),
            drain_s=float(doc.get("drain_s", 600.0)),
        )
    except KeyError as exc:
        raise ScenarioError(f"missing scenario field {exc}") from None
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ScenarioError):
            raise
        raise ScenarioError(str(exc)) from None


def load_scenario(path: str | Path) -> Scenario:
    path = Path(path)
    with open(path, "rb") as fh:
        doc = tomllib.load(fh)
    return scenario_from_dict(doc, base=path.parent)

"""Evaluation quantities: VOC-style AP/mAP, frames per minute, response-time
jitter, bandwidth from a run ledger, and a linear idle/busy energy model."""

from __future__ import annotations

import csv
import enum
import json
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .detection import BoundingBox, Detection, iou

DEFAULT_MATCH_IOU = 0.5


class MetricError(ValueError):
    """A metric is undefined for the given input (e.g. jitter of fewer than two samples)."""


# -- detection quality -------------------------------------------------------


@dataclass(frozen=True)
class GroundTruth:
    image_id: str
    annotations: tuple[tuple[int, BoundingBox], ...]

    def to_dict(self) -> dict:
        return {
            "image_id": self.image_id,
            "annotations": [
                {"class_id": c, "cx": b.cx, "cy": b.cy, "w": b.w, "h": b.h} for c, b in self.annotations
            ],
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "GroundTruth":
        anns = []
        for a in d["annotations"]:
            box = BoundingBox(float(a["cx"]), float(a["cy"]), float(a["w"]), float(a["h"]))
            for v in (box.cx, box.cy, box.w, box.h):
                if not 0.0 <= v <= 1.0:
                    raise ValueError(f"{d['image_id']}: annotation coordinate {v} outside [0, 1]")
            anns.append((int(a["class_id"]), box))
        return cls(str(d["image_id"]), tuple(anns))


def load_ground_truth(path: str | Path) -> dict[str, GroundTruth]:
    """Read ground truth from a directory of ``*.json`` files or a JSON-lines file."""
    path = Path(path)
    docs = []
    if path.is_dir():
        for p in sorted(path.glob("*.json")):
            docs.append(json.loads(p.read_text(encoding="utf-8")))
    else:
        for line in path.read_text(encoding="utf-8").splitlines():
            if line.strip():
                docs.append(json.loads(line))
    out = {}
    for d in docs:
        gt = GroundTruth.from_dict(d)
        out[gt.image_id] = gt
    return out


def save_ground_truth(truths: Iterable[GroundTruth], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for gt in truths:
            fh.write(json.dumps(gt.to_dict(), separators=(",", ":")) + "\n")


def match_detections(
    detections: Sequence[Detection],
    ground_truth: Sequence[BoundingBox],
    iou_threshold: float = DEFAULT_MATCH_IOU,
) -> tuple[list[bool], int]:
    """TP/FP flags for one image and one class, in descending score order.

    Each detection claims the still-unmatched ground-truth box it overlaps most
    (lowest index on ties) when that IoU reaches ``iou_threshold``.
    """
    order = sorted(range(len(detections)), key=lambda i: -detections[i].score)
    matched = [False] * len(ground_truth)
    flags = []
    for i in order:
        best, best_iou = -1, -1.0
        for j, gt in enumerate(ground_truth):
            if matched[j]:
                continue
            o = iou(detections[i].box, gt)
            if o > best_iou:
                best, best_iou = j, o
        if best >= 0 and best_iou >= iou_threshold:
            matched[best] = True
            flags.append(True)
        else:
            flags.append(False)
    return flags, len(ground_truth)


def average_precision(flags: Sequence[bool], n_gt: int) -> float | None:
    """All-point interpolated area under the precision/recall curve.

    ``None`` means undefined (no ground truth and no detections).
    """
    if n_gt == 0:
        return None if len(flags) == 0 else 0.0
    precisions, recalls = [], []
    tp = 0
    for i, hit in enumerate(flags, start=1):
        tp += bool(hit)
        precisions.append(tp / i)
        recalls.append(tp / n_gt)
    # precision envelope: best precision at this recall or beyond
    for i in range(len(precisions) - 2, -1, -1):
        precisions[i] = max(precisions[i], precisions[i + 1])
    ap = 0.0
    prev_recall = 0.0
    for p, r in zip(precisions, recalls):
        if r > prev_recall:
            ap += (r - prev_recall) * p
            prev_recall = r
    return ap


def mean_ap(per_class_aps: Mapping[int, float | None] | Sequence[float | None]) -> float:
    values = per_class_aps.values() if isinstance(per_class_aps, Mapping) else per_class_aps
    defined = [v for v in values if v is not None]
    if not defined:
        raise MetricError("mAP undefined: no class has a defined AP")
    # offsets from the first value keep a mean of equal APs exact
    base = defined[0]
    return base + math.fsum(v - base for v in defined) / len(defined)


def class_flags(
    detections: Mapping[str, Sequence[Detection]],
    truths: Mapping[str, GroundTruth],
    class_id: int,
    iou_threshold: float = DEFAULT_MATCH_IOU,
) -> tuple[list[bool], int]:
    """Pool one class across images: global score ordering, per-image matching."""
    pooled = []
    for image_id in sorted(set(detections) | set(truths)):
        for k, det in enumerate(detections.get(image_id, ())):
            if det.class_id == class_id:
                pooled.append((-det.score, image_id, k, det))
    pooled.sort(key=lambda t: (t[0], t[1], t[2]))
    gt_boxes = {
        image_id: [b for c, b in gt.annotations if c == class_id] for image_id, gt in truths.items()
    }
    n_gt = sum(len(v) for v in gt_boxes.values())
    used: dict[str, list[bool]] = {k: [False] * len(v) for k, v in gt_boxes.items()}
    flags = []
    for _, image_id, _, det in pooled:
        boxes = gt_boxes.get(image_id, [])
        taken = used.get(image_id, [])
        best, best_iou = -1, -1.0
        for j, gt in enumerate(boxes):
            if taken[j]:
                continue
            o = iou(det.box, gt)
            if o > best_iou:
                best, best_iou = j, o
        if best >= 0 and best_iou >= iou_threshold:
            taken[best] = True
            flags.append(True)
        else:
            flags.append(False)
    return flags, n_gt


def evaluate_map(
    detections: Mapping[str, Sequence[Detection]],
    truths: Mapping[str, GroundTruth],
    iou_threshold: float = DEFAULT_MATCH_IOU,
) -> tuple[float, dict[int, float | None]]:
    classes = {c for gt in truths.values() for c, _ in gt.annotations}
    classes |= {d.class_id for dets in detections.values() for d in dets}
    per_class = {}
    for c in sorted(classes):
        flags, n_gt = class_flags(detections, truths, c, iou_threshold)
        per_class[c] = average_precision(flags, n_gt)
    return mean_ap(per_class), per_class


# -- timing ----------------------------------------------------------------


def fpm(completion_times_s: Iterable[float], window_s: float, start_s: float = 0.0) -> float:
    """Completions inside ``[start_s, start_s + window_s]`` per minute of window."""
    if window_s <= 0:
        raise MetricError("window must be positive")
    end = start_s + window_s
    count = sum(1 for t in completion_times_s if start_s <= t <= end)
    return count / (window_s / 60.0)


def jitter(latencies_ms: Sequence[float]) -> float:
    """Mean absolute difference between consecutive latencies (completion order)."""
    if len(latencies_ms) < 2:
        raise MetricError("jitter needs at least two latency samples")
    total = sum(abs(b - a) for a, b in zip(latencies_ms, latencies_ms[1:]))
    return total / (len(latencies_ms) - 1)


# -- run ledger ------------------------------------------------------------


class Direction(str, enum.Enum):
    GATEWAY_TO_MASTER = "GatewayToMaster"
    MASTER_TO_WORKER = "MasterToWorker"
    WORKER_TO_MASTER = "WorkerToMaster"
    MASTER_TO_GATEWAY = "MasterToGateway"


LEDGER_COLUMNS = ("task_id", "image_id", "direction", "bytes", "send_time_us", "recv_time_us")
COMPLETION_COLUMNS = ("task_id", "image_id", "worker_id", "status", "enqueue_time_us", "done_time_us", "compute_ms")


@dataclass(frozen=True)
class LedgerEntry:
    task_id: str
    image_id: str
    direction: Direction
    bytes_on_wire: int
    send_time_us: int
    recv_time_us: int

    def __post_init__(self):
        if self.recv_time_us < self.send_time_us:
            raise ValueError("recv_time precedes send_time")


@dataclass(frozen=True)
class Completion:
    task_id: str
    image_id: str
    worker_id: str
    status: int
    enqueue_time_us: int
    done_time_us: int
    compute_ms: float


@dataclass
class RunLedger:
    entries: list[LedgerEntry] = field(default_factory=list)
    completions: list[Completion] = field(default_factory=list)

    def record(self, task_id: str, image_id: str, direction: Direction, nbytes: int, send_us: int, recv_us: int) -> None:
        self.entries.append(LedgerEntry(task_id, image_id, direction, nbytes, send_us, recv_us))

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(LEDGER_COLUMNS)
            for e in self.entries:
                w.writerow([e.task_id, e.image_id, e.direction.value, e.bytes_on_wire, e.send_time_us, e.recv_time_us])

    def write_completions_csv(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(COMPLETION_COLUMNS)
            for c in self.completions:
                w.writerow([c.task_id, c.image_id, c.worker_id, c.status, c.enqueue_time_us, c.done_time_us,
                            repr(c.compute_ms)])

    @classmethod
    def read_csv(cls, path: str | Path, completions_path: str | Path | None = None) -> "RunLedger":
        ledger = cls()
        with open(path, encoding="utf-8", newline="") as fh:
            rows = csv.reader(fh)
            if tuple(next(rows)) != LEDGER_COLUMNS:
                raise ValueError(f"{path}: unexpected ledger columns")
            for r in rows:
                ledger.record(r[0], r[1], Direction(r[2]), int(r[3]), int(r[4]), int(r[5]))
        if completions_path is not None:
            with open(completions_path, encoding="utf-8", newline="") as fh:
                rows = csv.reader(fh)
                if tuple(next(rows)) != COMPLETION_COLUMNS:
                    raise ValueError(f"{completions_path}: unexpected completion columns")
                for r in rows:
                    ledger.completions.append(Completion(r[0], r[1], r[2], int(r[3]), int(r[4]), int(r[5]), float(r[6])))
        return ledger

    def response_times_ms(self) -> list[tuple[int, str, float]]:
        """Gateway-observed response per image: ``(response_recv_us, image_id, ms)`` in completion order.

        Measured from the first byte of the HTTP request leaving the gateway to the
        HTTP response arriving back; only images that got a response are listed.
        """
        sent: dict[str, int] = {}
        done: dict[str, int] = {}
        for e in self.entries:
            if e.direction is Direction.GATEWAY_TO_MASTER:
                sent.setdefault(e.image_id, e.send_time_us)
            elif e.direction is Direction.MASTER_TO_GATEWAY:
                done[e.image_id] = e.recv_time_us
        out = [(t, img, (t - sent[img]) / 1000) for img, t in done.items() if img in sent]
        out.sort()
        return out


@dataclass(frozen=True)
class BandwidthSummary:
    total_bytes: int
    bytes_per_minute: float
    messages: int


def bandwidth(
    ledger: RunLedger,
    directions: Iterable[Direction] | Direction | None = None,
    duration_s: float | None = None,
) -> BandwidthSummary:
    """Total bytes on the wire for the selected directions, and the per-minute rate.

    The rate divides by ``duration_s`` when given, otherwise by the span of the
    selected messages.
    """
    if isinstance(directions, Direction):
        directions = {directions}
    wanted = set(directions) if directions is not None else set(Direction)
    selected = [e for e in ledger.entries if e.direction in wanted]
    if not selected:
        raise MetricError("no ledger entries match the direction filter")
    total = sum(e.bytes_on_wire for e in selected)
    if duration_s is None:
        span_us = max(e.recv_time_us for e in selected) - min(e.send_time_us for e in selected)
        duration_s = span_us / 1e6
    rate = total / (duration_s / 60.0) if duration_s > 0 else float("inf")
    return BandwidthSummary(total, rate, len(selected))


# -- energy ----------------------------------------------------------------


@dataclass(frozen=True)
class PowerSpec:
    idle_watts: float
    busy_watts: float

    def __post_init__(self):
        if not self.busy_watts >= self.idle_watts >= 0:
            raise ValueError("power model requires busy_watts >= idle_watts >= 0")


def _busy_seconds(intervals: Iterable[tuple[float, float]], duration_s: float) -> float:
    clipped = sorted((max(0.0, s), min(duration_s, e)) for s, e in intervals)
    total = 0.0
    cur_s = cur_e = None
    for s, e in clipped:
        if e <= s:
            continue
        if cur_e is None or s > cur_e:
            if cur_e is not None:
                total += cur_e - cur_s
            cur_s, cur_e = s, e
        else:
            cur_e = max(cur_e, e)
    if cur_e is not None:
        total += cur_e - cur_s
    return total


def energy(
    busy_intervals: Mapping[str, Iterable[tuple[float, float]]],
    power_model: Mapping[str, PowerSpec],
    duration_s: float,
) -> tuple[dict[str, float], float]:
    """Joules per node over ``duration_s``: idle draw throughout plus the busy increment.

    Overlapping busy intervals on one node count once.
    """
    if duration_s < 0:
        raise MetricError("duration must be >= 0")
    per_node = {}
    for node, spec in power_model.items():
        busy = _busy_seconds(busy_intervals.get(node, ()), duration_s)
        per_node[node] = spec.idle_watts * duration_s + (spec.busy_watts - spec.idle_watts) * busy
    return per_node, sum(per_node.values())


def group_by_image(pairs: Iterable[tuple[str, Detection]]) -> dict[str, list[Detection]]:
    out: dict[str, list[Detection]] = defaultdict(list)
    for image_id, det in pairs:
        out[image_id].append(det)
    return dict(out)

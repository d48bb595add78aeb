"""Pluggable detectors run by a worker.

``TensorFileDetector`` decodes a precomputed grid tensor per image and applies
NMS. ``MockDetector`` returns canned detections. Either can carry a
:class:`LatencyModel` whose value is reported as compute time instead of a
wall-clock measurement (used under the virtual clock and by mock workers).
"""

from __future__ import annotations

import random
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol, Sequence

from ..detection import (
    DEFAULT_IOU_THRESHOLD,
    DEFAULT_SCORE_THRESHOLD,
    Detection,
    GridValidationError,
    decode,
    nms,
    read_grid,
)
from ..protocol import TaskEnvelope


class DetectorError(Exception):
    """The detector could not produce a result for a task; the worker itself stays healthy."""


@dataclass(frozen=True)
class LatencyModel:
    """Modeled compute latency.

    ``fixed``: always ``base_ms``. ``uniform``: ``base_ms + spread_ms * u`` with
    ``u`` in [0, 1) drawn from a generator seeded by ``(seed, key)``. Keying by
    image id makes each task's latency independent of which worker runs it and
    of arrival order, so equal seeds replay identical latency sequences.
    """

    kind: str = "fixed"
    base_ms: float = 0.0
    spread_ms: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("fixed", "uniform"):
            raise ValueError(f"unknown latency kind {self.kind!r}")
        if self.base_ms < 0 or self.spread_ms < 0:
            raise ValueError("latency base and spread must be >= 0")

    @classmethod
    def parse(cls, text: str, seed: int = 0) -> "LatencyModel":
        """Parse ``fixed:<ms>`` or ``uniform:<base_ms>:<spread_ms>``."""
        parts = text.strip().split(":")
        try:
            if parts[0] == "fixed" and len(parts) == 2:
                return cls("fixed", float(parts[1]), 0.0, seed)
            if parts[0] == "uniform" and len(parts) == 3:
                return cls("uniform", float(parts[1]), float(parts[2]), seed)
        except ValueError:
            pass
        raise ValueError(f"latency must look like fixed:100 or uniform:80:40, got {text!r}")

    def describe(self) -> str:
        if self.kind == "fixed":
            return f"fixed:{self.base_ms:g}"
        return f"uniform:{self.base_ms:g}:{self.spread_ms:g}"

    def latency_us(self, key: str) -> int:
        if self.kind == "fixed" or self.spread_ms == 0:
            return round(self.base_ms * 1000)
        u = random.Random(f"{self.seed}:{key}").random()
        return round((self.base_ms + self.spread_ms * u) * 1000)

    def latency_ms(self, key: str) -> float:
        return self.latency_us(key) / 1000


class Detector(Protocol):
    latency: LatencyModel | None

    def detect(self, envelope: TaskEnvelope) -> list[Detection]: ...


class MockDetector:
    def __init__(self, detections: Sequence[Detection] = (), latency: LatencyModel | None = None):
        self.detections = tuple(detections)
        self.latency = latency if latency is not None else LatencyModel("fixed", 0.0)

    def detect(self, envelope: TaskEnvelope) -> list[Detection]:
        return list(self.detections)


class TensorFileDetector:
    def __init__(
        self,
        fixture_dir: str | Path,
        score_threshold: float = DEFAULT_SCORE_THRESHOLD,
        iou_threshold: float = DEFAULT_IOU_THRESHOLD,
        latency: LatencyModel | None = None,
        cache: bool = True,
    ):
        self.fixture_dir = Path(fixture_dir)
        self.score_threshold = score_threshold
        self.iou_threshold = iou_threshold
        self.latency = latency
        self._cache: dict[str, list[Detection]] | None = {} if cache else None
        self._lock = threading.Lock()

    def fixture_path(self, image_id: str) -> Path:
        return self.fixture_dir / f"{image_id}.grid"

    def tensor_file_detect(self, image_id: str) -> list[Detection]:
        if self._cache is not None:
            with self._lock:
                hit = self._cache.get(image_id)
            if hit is not None:
                return list(hit)
        if "/" in image_id or "\\" in image_id or image_id.startswith("."):
            raise DetectorError(f"refusing suspicious image id {image_id!r}")
        path = self.fixture_path(image_id)
        try:
            tensor = read_grid(path)
        except FileNotFoundError:
            raise DetectorError(f"missing fixture {path}") from None
        except (GridValidationError, UnicodeDecodeError) as exc:
            raise DetectorError(f"malformed fixture {path}: {exc}") from None
        result = nms(decode(tensor, self.score_threshold), self.iou_threshold)
        if self._cache is not None:
            with self._lock:
                self._cache[image_id] = result
        return list(result)

    def detect(self, envelope: TaskEnvelope) -> list[Detection]:
        return self.tensor_file_detect(envelope.image_id)

"""Grid-tensor decoding, IoU and non-maximum suppression.

A detector head emits an ``s x s`` grid; every cell carries one box as the
vector ``[confidence, cx, cy, w, h, p_1 .. p_k]``. Box coordinates are
normalized to the whole image, not to the cell.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

DEFAULT_SCORE_THRESHOLD = 0.25
DEFAULT_IOU_THRESHOLD = 0.45


class GridValidationError(ValueError):
    """Raised for a malformed grid tensor; ``cell`` names the offending cell."""

    def __init__(self, message: str, cell: tuple[int, int] | None = None):
        self.cell = cell
        if cell is not None:
            message = f"cell (row={cell[0]}, col={cell[1]}): {message}"
        super().__init__(message)


class CellConflictError(ValueError):
    def __init__(self, cell: tuple[int, int]):
        self.cell = cell
        super().__init__(f"two detections map to grid cell (row={cell[0]}, col={cell[1]})")


@dataclass(frozen=True)
class GridSpec:
    s: int
    num_classes: int

    def __post_init__(self):
        if self.s < 1:
            raise GridValidationError(f"grid side must be >= 1, got {self.s}")
        if self.num_classes < 1:
            raise GridValidationError(f"num_classes must be >= 1, got {self.num_classes}")

    @property
    def cell_len(self) -> int:
        return 5 + self.num_classes

    @property
    def num_cells(self) -> int:
        return self.s * self.s

    @property
    def total_elements(self) -> int:
        return self.num_cells * self.cell_len


@dataclass(frozen=True)
class CellPrediction:
    confidence: float
    cx: float
    cy: float
    w: float
    h: float
    class_probs: tuple[float, ...]

    @classmethod
    def zeros(cls, num_classes: int) -> "CellPrediction":
        return cls(0.0, 0.0, 0.0, 0.0, 0.0, (0.0,) * num_classes)

    @classmethod
    def from_vector(cls, values: Sequence[float]) -> "CellPrediction":
        return cls(
            float(values[0]),
            float(values[1]),
            float(values[2]),
            float(values[3]),
            float(values[4]),
            tuple(float(v) for v in values[5:]),
        )

    def to_vector(self) -> list[float]:
        return [self.confidence, self.cx, self.cy, self.w, self.h, *self.class_probs]


@dataclass(frozen=True)
class BoundingBox:
    cx: float
    cy: float
    w: float
    h: float

    @classmethod
    def from_corners(cls, x1: float, y1: float, x2: float, y2: float) -> "BoundingBox":
        return cls((x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1)

    @property
    def corners(self) -> tuple[float, float, float, float]:
        hw, hh = self.w / 2, self.h / 2
        return (self.cx - hw, self.cy - hh, self.cx + hw, self.cy + hh)

    @property
    def area(self) -> float:
        return self.w * self.h


@dataclass(frozen=True)
class Detection:
    box: BoundingBox
    class_id: int
    score: float

    def to_dict(self) -> dict:
        return {
            "class_id": self.class_id,
            "score": self.score,
            "cx": self.box.cx,
            "cy": self.box.cy,
            "w": self.box.w,
            "h": self.box.h,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Detection":
        return cls(
            BoundingBox(float(d["cx"]), float(d["cy"]), float(d["w"]), float(d["h"])),
            int(d["class_id"]),
            float(d["score"]),
        )


@dataclass(frozen=True)
class GridTensor:
    spec: GridSpec
    cells: tuple[CellPrediction, ...] = field(default=())

    @classmethod
    def zeros(cls, spec: GridSpec) -> "GridTensor":
        blank = CellPrediction.zeros(spec.num_classes)
        return cls(spec, (blank,) * spec.num_cells)

    def cell(self, row: int, col: int) -> CellPrediction:
        return self.cells[row * self.spec.s + col]

    def validate(self) -> None:
        spec = self.spec
        if len(self.cells) != spec.num_cells:
            raise GridValidationError(
                f"expected {spec.num_cells} cells for s={spec.s}, got {len(self.cells)}"
            )
        for idx, cell in enumerate(self.cells):
            where = divmod(idx, spec.s)
            if len(cell.class_probs) != spec.num_classes:
                raise GridValidationError(
                    f"expected {spec.num_classes} class probabilities, got {len(cell.class_probs)}",
                    where,
                )
            values = cell.to_vector()
            for name, v in zip(("confidence", "cx", "cy", "w", "h"), values):
                if not math.isfinite(v):
                    raise GridValidationError(f"{name} is not finite ({v!r})", where)
            if not 0.0 <= cell.confidence <= 1.0:
                raise GridValidationError(f"confidence {cell.confidence} outside [0, 1]", where)
            if cell.w < 0 or cell.h < 0:
                raise GridValidationError("negative box size", where)
            for j, p in enumerate(cell.class_probs):
                if not math.isfinite(p) or not 0.0 <= p <= 1.0:
                    raise GridValidationError(f"class probability {j} = {p!r} outside [0, 1]", where)


def _argmax(values: Sequence[float]) -> int:
    best = 0
    for i in range(1, len(values)):
        if values[i] > values[best]:
            best = i
    return best


def decode(tensor: GridTensor, score_threshold: float = DEFAULT_SCORE_THRESHOLD) -> list[Detection]:
    """Turn every cell into a candidate and drop the ones scoring below ``score_threshold``.

    The result is ordered by descending score; equal scores keep row-major cell order.
    """
    if not 0.0 <= score_threshold <= 1.0:
        raise ValueError(f"score_threshold must be in [0, 1], got {score_threshold}")
    tensor.validate()
    candidates = []
    for idx, cell in enumerate(tensor.cells):
        cls = _argmax(cell.class_probs)
        score = cell.confidence * cell.class_probs[cls]
        if score < score_threshold:
            continue
        candidates.append((idx, Detection(BoundingBox(cell.cx, cell.cy, cell.w, cell.h), cls, score)))
    candidates.sort(key=lambda pair: (-pair[1].score, pair[0]))
    return [det for _, det in candidates]


def cell_of(box: BoundingBox, s: int) -> tuple[int, int]:
    """(row, col) of the grid cell holding the box center; centers on the far edge clamp inward."""
    col = min(int(math.floor(box.cx * s)), s - 1)
    row = min(int(math.floor(box.cy * s)), s - 1)
    return (max(row, 0), max(col, 0))


def encode(detections: Iterable[Detection], spec: GridSpec) -> GridTensor:
    """Build a tensor whose decode yields ``detections`` again.

    Each detection occupies the cell containing its center, with confidence equal to its
    score and a one-hot class vector.
    """
    cells = list(GridTensor.zeros(spec).cells)
    taken: set[tuple[int, int]] = set()
    for det in detections:
        row, col = cell_of(det.box, spec.s)
        if (row, col) in taken:
            raise CellConflictError((row, col))
        taken.add((row, col))
        probs = [0.0] * spec.num_classes
        probs[det.class_id] = 1.0
        cells[row * spec.s + col] = CellPrediction(
            det.score, det.box.cx, det.box.cy, det.box.w, det.box.h, tuple(probs)
        )
    return GridTensor(spec, tuple(cells))


def iou(a: BoundingBox, b: BoundingBox) -> float:
    ca, cb = a.corners, b.corners
    if ca == cb:
        # exact coincidence is full overlap, including zero-area boxes; also avoids rounding below 1
        return 1.0
    ax1, ay1, ax2, ay2 = ca
    bx1, by1, bx2, by2 = cb
    iw = max(0.0, min(ax2, bx2) - max(ax1, bx1))
    ih = max(0.0, min(ay2, by2) - max(ay1, by1))
    inter = iw * ih
    union = a.area + b.area - inter
    if union <= 0.0:
        return 0.0
    return min(1.0, max(0.0, inter / union))


def nms(detections: Iterable[Detection], iou_threshold: float = DEFAULT_IOU_THRESHOLD) -> list[Detection]:
    """Greedy per-class suppression.

    A detection is dropped when it overlaps an already kept detection of the same class
    with IoU >= ``iou_threshold``. Boxes of different classes never suppress each other.
    """
    if not 0.0 <= iou_threshold <= 1.0:
        raise ValueError(f"iou_threshold must be in [0, 1], got {iou_threshold}")
    # stable sort: equal scores keep input order
    ordered = sorted(detections, key=lambda d: -d.score)
    kept: list[Detection] = []
    for det in ordered:
        if any(k.class_id == det.class_id and iou(k.box, det.box) >= iou_threshold for k in kept):
            continue
        kept.append(det)
    return kept


# sidecar fixture format: "S K" then S*S lines of 5+K floats


def format_grid(tensor: GridTensor) -> str:
    lines = [f"{tensor.spec.s} {tensor.spec.num_classes}"]
    for cell in tensor.cells:
        lines.append(" ".join(repr(float(v)) for v in cell.to_vector()))
    return "\n".join(lines) + "\n"


def parse_grid(text: str) -> GridTensor:
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise GridValidationError("empty grid file")
    head = lines[0].split(" ")
    if len(head) != 2:
        raise GridValidationError(f"header must be 'S K', got {lines[0]!r}")
    try:
        spec = GridSpec(int(head[0]), int(head[1]))
    except ValueError as exc:
        raise GridValidationError(f"bad header {lines[0]!r}: {exc}") from None
    body = lines[1:]
    if len(body) != spec.num_cells:
        raise GridValidationError(f"expected {spec.num_cells} cell lines, got {len(body)}")
    cells = []
    for idx, line in enumerate(body):
        where = divmod(idx, spec.s)
        parts = line.split(" ")
        if len(parts) != spec.cell_len:
            raise GridValidationError(f"expected {spec.cell_len} values, got {len(parts)}", where)
        try:
            values = [float(p) for p in parts]
        except ValueError:
            raise GridValidationError(f"non-numeric value in {line!r}", where) from None
        cells.append(CellPrediction.from_vector(values))
    tensor = GridTensor(spec, tuple(cells))
    tensor.validate()
    return tensor


def read_grid(path: str | Path) -> GridTensor:
    return parse_grid(Path(path).read_text(encoding="utf-8"))


def write_grid(tensor: GridTensor, path: str | Path) -> None:
    Path(path).write_text(format_grid(tensor), encoding="utf-8", newline="\n")

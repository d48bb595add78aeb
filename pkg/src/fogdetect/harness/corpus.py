"""Synthetic VOC-style corpus: ground truth plus per-mode grid-tensor fixtures.

High-accuracy fixtures reproduce every object with small box noise. Low-latency
fixtures model a downscaled input: small objects are often missed, boxes are
noisier, classes are sometimes confused and spurious boxes appear.
"""

from __future__ import annotations

import random
from dataclasses import dataclass
from pathlib import Path

from ..detection import BoundingBox, Detection, GridSpec, encode, iou, write_grid
from ..metrics import GroundTruth, save_ground_truth


@dataclass(frozen=True)
class Quality:
    miss_small: float = 0.0
    miss_large: float = 0.0
    center_noise: float = 0.0
    size_noise: float = 0.0
    confuse: float = 0.0
    spurious: float = 0.0
    score_range: tuple[float, float] = (0.6, 1.0)


PERFECT = Quality()
ACCURATE = Quality(miss_small=0.03, center_noise=0.05, size_noise=0.05, spurious=0.1, score_range=(0.55, 1.0))
DEGRADED = Quality(miss_small=0.55, miss_large=0.15, center_noise=0.2, size_noise=0.2, confuse=0.12,
                   spurious=0.4, score_range=(0.3, 0.8))


def _clamp(v: float, lo: float, hi: float) -> float:
    return min(hi, max(lo, v))


def random_ground_truth(image_id: str, rng: random.Random, spec: GridSpec, max_objects: int = 4) -> GroundTruth:
    """Up to ``max_objects`` boxes in distinct cells; same-class boxes barely overlap."""
    s = spec.s
    cells = rng.sample(range(s * s), rng.randint(1, max_objects))
    anns: list[tuple[int, BoundingBox]] = []
    for cell in cells:
        row, col = divmod(cell, s)
        cx = (col + rng.uniform(0.1, 0.9)) / s
        cy = (row + rng.uniform(0.1, 0.9)) / s
        w = min(rng.uniform(0.05, 0.4), 2 * min(cx, 1 - cx))
        h = min(rng.uniform(0.05, 0.4), 2 * min(cy, 1 - cy))
        cls = rng.randrange(spec.num_classes)
        box = BoundingBox(cx, cy, w, h)
        if any(c == cls and iou(b, box) >= 0.3 for c, b in anns):
            continue
        anns.append((cls, box))
    return GroundTruth(image_id, tuple(anns))


def degrade(gt: GroundTruth, rng: random.Random, spec: GridSpec, quality: Quality) -> list[Detection]:
    s = spec.s
    dets = []
    used = set()
    for cls, box in gt.annotations:
        small = box.area < 0.02
        if rng.random() < (quality.miss_small if small else quality.miss_large):
            continue
        row, col = int(box.cy * s), int(box.cx * s)
        cx = _clamp(box.cx + rng.gauss(0, quality.center_noise) * box.w, col / s + 1e-6, (col + 1) / s - 1e-6)
        cy = _clamp(box.cy + rng.gauss(0, quality.center_noise) * box.h, row / s + 1e-6, (row + 1) / s - 1e-6)
        w = _clamp(box.w * (1 + rng.gauss(0, quality.size_noise)), 0.01, 1.0)
        h = _clamp(box.h * (1 + rng.gauss(0, quality.size_noise)), 0.01, 1.0)
        if rng.random() < quality.confuse:
            cls = rng.randrange(spec.num_classes)
        score = rng.uniform(*quality.score_range)
        dets.append(Detection(BoundingBox(cx, cy, w, h), cls, score))
        used.add((row, col))
    if rng.random() < quality.spurious:
        free = [c for c in range(s * s) if divmod(c, s) not in used]
        if free:
            row, col = divmod(rng.choice(free), s)
            box = BoundingBox((col + 0.5) / s, (row + 0.5) / s, rng.uniform(0.05, 0.2), rng.uniform(0.05, 0.2))
            dets.append(Detection(box, rng.randrange(spec.num_classes), rng.uniform(0.3, 0.6)))
    return dets


def perfect_detections(gt: GroundTruth, rng: random.Random) -> list[Detection]:
    return [Detection(box, cls, rng.uniform(0.5, 1.0)) for cls, box in gt.annotations]


def build_corpus(
    out_dir: str | Path,
    n_images: int,
    seed: int = 0,
    spec: GridSpec = GridSpec(7, 20),
    qualities: dict[str, Quality] | None = None,
    prefix: str = "img",
) -> dict[str, Path]:
    """Write ``gt.jsonl`` and one fixture directory per quality name; returns their paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    qualities = qualities if qualities is not None else {"accuracy": ACCURATE, "latency": DEGRADED}
    rng = random.Random(seed)
    truths = [random_ground_truth(f"{prefix}{k:05d}", rng, spec) for k in range(n_images)]
    gt_path = out_dir / "gt.jsonl"
    save_ground_truth(truths, gt_path)
    paths = {"ground_truth": gt_path}
    for name, quality in qualities.items():
        fixture_dir = out_dir / name
        fixture_dir.mkdir(exist_ok=True)
        qrng = random.Random(f"{seed}:{name}")
        for gt in truths:
            dets = perfect_detections(gt, qrng) if quality == PERFECT else degrade(gt, qrng, spec, quality)
            write_grid(encode(dets, spec), fixture_dir / f"{gt.image_id}.grid")
        paths[name] = fixture_dir
    return paths

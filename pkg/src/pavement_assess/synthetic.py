"""Seeded synthetic pavement images with matching annotation records.

Each distress instance is painted into its box with a type-specific colour
so that both networks have a learnable signal at desk scale.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .annotations import (
    AnnotationRecord,
    BoundingBox,
    DistressInstance,
    DistressType,
    Severity,
    StructuredCaption,
    render_caption,
)
from .autodiff.io import load_ften, save_ften

_TYPES = list(DistressType)
_SEVERITIES = list(Severity)


@dataclass(frozen=True)
class SyntheticSample:
    record: AnnotationRecord
    image: np.ndarray  # (H, W, 3) in [0, 1]


_PALETTE = np.array(
    [
        [1.0, 0.3, 0.3],
        [0.3, 1.0, 0.3],
        [0.3, 0.3, 1.0],
        [1.0, 1.0, 0.3],
        [1.0, 0.3, 1.0],
        [0.3, 1.0, 1.0],
        [1.0, 0.65, 0.3],
    ]
)


def _colour(distress: DistressType, severity: Severity) -> np.ndarray:
    return _PALETTE[_TYPES.index(distress)] * (0.6 + 0.2 * severity.rank)


def paint(height: int, width: int, instances: Sequence[DistressInstance], rng: np.random.Generator) -> np.ndarray:
    image = rng.uniform(0.0, 0.15, size=(height, width, 3))
    ys, xs = np.mgrid[0:height, 0:width] + 0.5
    for inst in instances:
        b = inst.box
        inside = (xs >= b.x0) & (xs < b.x1) & (ys >= b.y0) & (ys < b.y1)
        image[inside] = _colour(inst.distress, inst.severity)
    return image.astype(np.float32).astype(np.float64)  # exact .ften round trip


def make_dataset(
    n: int,
    height: int = 8,
    width: int = 8,
    seed: int = 0,
    max_instances: int = 2,
    prefix: str = "img",
) -> list[SyntheticSample]:
    """``n`` samples with 0..max_instances distinct distress types and integer PCIs."""
    rng = np.random.default_rng(seed)
    samples = []
    for k in range(n):
        count = int(rng.integers(0, max_instances + 1))
        kinds = rng.choice(len(_TYPES), size=count, replace=False)
        instances = []
        for kind in sorted(kinds):
            w, h = rng.uniform(2.0, width / 2), rng.uniform(2.0, height / 2)
            box = BoundingBox(rng.uniform(w / 2, width - w / 2), rng.uniform(h / 2, height - h / 2), w, h)
            instances.append(DistressInstance(_TYPES[kind], _SEVERITIES[int(rng.integers(3))], box))
        instances = tuple(instances)
        pci = float(rng.integers(0, 101))
        record = AnnotationRecord(f"{prefix}{k:03d}", width, height, pci, instances, StructuredCaption.from_instances(instances))
        samples.append(SyntheticSample(record, paint(height, width, instances, rng)))
    return samples


def caption_tokens(record: AnnotationRecord) -> list[str]:
    """Canonical caption text of ``record`` split on whitespace."""
    return render_caption(record.caption).split()


def write_dataset(samples: Sequence[SyntheticSample], annotations_path, images_dir) -> None:
    images = Path(images_dir)
    images.mkdir(parents=True, exist_ok=True)
    Path(annotations_path).parent.mkdir(parents=True, exist_ok=True)
    with open(annotations_path, "w", encoding="utf-8") as fh:
        for s in samples:
            fh.write(s.record.to_json() + "\n")
            save_ften(images / f"{s.record.image_id}.ften", s.image)


def load_image(images_dir, image_id: str) -> np.ndarray:
    return load_ften(Path(images_dir) / f"{image_id}.ften")

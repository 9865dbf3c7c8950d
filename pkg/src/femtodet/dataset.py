"""Synthetic shapes dataset: colored rectangles/ellipses on textured noise.

Class identity is the fill color (red / green / blue); shape alternates
randomly. Everything is generated from one seeded generator, so a config
fully determines both splits.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import yaml

from .augment import Sample

CLASS_COLORS = np.array([
    [0.85, 0.18, 0.18],
    [0.18, 0.78, 0.22],
    [0.20, 0.35, 0.90],
], dtype=np.float32)


@dataclass
class ToyDataConfig:
    image_size: int = 128
    num_train: int = 512
    num_val: int = 128
    num_classes: int = 3
    min_objects: int = 1
    max_objects: int = 4
    min_size: int = 24
    max_size: int = 64
    seed: int = 0

    def __post_init__(self):
        if not 1 <= self.num_classes <= len(CLASS_COLORS):
            raise ValueError(f"num_classes must be in [1, {len(CLASS_COLORS)}]")
        if self.min_size < 2 or self.max_size >= self.image_size:
            raise ValueError("object sizes must fit the image")

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in (
            "image_size", "num_train", "num_val", "num_classes",
            "min_objects", "max_objects", "min_size", "max_size", "seed")}

    @staticmethod
    def from_dict(d: dict) -> "ToyDataConfig":
        return ToyDataConfig(**d)

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    @staticmethod
    def from_yaml(text: str) -> "ToyDataConfig":
        return ToyDataConfig.from_dict(yaml.safe_load(text))


def _background(size: int, rng: np.random.Generator) -> np.ndarray:
    base = 0.42 + 0.06 * rng.random()
    img = np.full((3, size, size), base, dtype=np.float32)
    img += (0.05 * rng.standard_normal((1, size, size))).astype(np.float32)
    # low-frequency cast so the background is not flat
    ramp = np.linspace(-0.03, 0.03, size, dtype=np.float32)
    img += ramp.reshape(1, 1, size) * rng.choice([-1.0, 1.0])
    return np.clip(img, 0.0, 1.0)


def generate_sample(cfg: ToyDataConfig, rng: np.random.Generator) -> Sample:
    size = cfg.image_size
    img = _background(size, rng)
    boxes: list[list[float]] = []
    labels: list[int] = []
    n_objects = int(rng.integers(cfg.min_objects, cfg.max_objects + 1))
    for _ in range(n_objects):
        for _attempt in range(20):
            w = int(rng.integers(cfg.min_size, cfg.max_size + 1))
            h = int(rng.integers(cfg.min_size, cfg.max_size + 1))
            x1 = int(rng.integers(0, size - w + 1))
            y1 = int(rng.integers(0, size - h + 1))
            box = [x1, y1, x1 + w, y1 + h]
            if all(_iou(box, b) < 0.10 for b in boxes):
                break
        else:
            continue
        cls = int(rng.integers(0, cfg.num_classes))
        color = np.clip(CLASS_COLORS[cls] + 0.04 * rng.standard_normal(3), 0, 1).astype(np.float32)
        if rng.random() < 0.5:
            img[:, y1 : y1 + h, x1 : x1 + w] = color.reshape(3, 1, 1)
        else:
            yy, xx = np.mgrid[0:h, 0:w]
            cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
            mask = ((yy - cy) / (h / 2.0)) ** 2 + ((xx - cx) / (w / 2.0)) ** 2 <= 1.0
            region = img[:, y1 : y1 + h, x1 : x1 + w]
            img[:, y1 : y1 + h, x1 : x1 + w] = np.where(mask[None], color.reshape(3, 1, 1), region)
        boxes.append(box)
        labels.append(cls)
    return Sample(img, np.array(boxes, np.float32).reshape(-1, 4), np.array(labels, np.int64))


def _iou(a, b) -> float:
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    ua = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / ua if ua > 0 else 0.0


def generate_split(cfg: ToyDataConfig, split: str) -> list[Sample]:
    """Deterministic split; 'train' and 'val' use disjoint seed streams."""
    if split not in ("train", "val"):
        raise ValueError(f"unknown split {split!r}")
    count = cfg.num_train if split == "train" else cfg.num_val
    offset = 0 if split == "train" else 1
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, offset]))
    return [generate_sample(cfg, rng) for _ in range(count)]

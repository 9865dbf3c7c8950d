"""Box-preserving image augmentations.

Every op returns a new Sample whose invariants hold (boxes inside the image,
positive area, one label per box); boxes that an op pushes out of frame or
squashes below 1 px^2 are dropped together with their labels.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

FILL_VALUE = 0.45  # neutral background for exposed canvas


@dataclass
class Sample:
    """One detection example: CHW float image in [0,1], xyxy boxes, class ids."""

    image: np.ndarray
    boxes: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.float32)
        self.boxes = np.asarray(self.boxes, dtype=np.float32).reshape(-1, 4)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)

    @property
    def hw(self) -> tuple[int, int]:
        return self.image.shape[1], self.image.shape[2]

    def validate(self):
        if self.image.ndim != 3 or self.image.shape[0] != 3:
            raise ValueError(f"image must be (3,H,W), got {self.image.shape}")
        if len(self.boxes) != len(self.labels):
            raise ValueError("boxes/labels length mismatch")
        h, w = self.hw
        if len(self.boxes):
            if self.boxes[:, 0].min() < 0 or self.boxes[:, 1].min() < 0:
                raise ValueError("box outside image (negative coord)")
            if self.boxes[:, 2].max() > w or self.boxes[:, 3].max() > h:
                raise ValueError("box outside image bounds")
            if np.any(self.boxes[:, 2] <= self.boxes[:, 0]) or np.any(self.boxes[:, 3] <= self.boxes[:, 1]):
                raise ValueError("box with non-positive area")
        return self

    def copy(self) -> "Sample":
        return Sample(self.image.copy(), self.boxes.copy(), self.labels.copy())


def _finish_boxes(boxes: np.ndarray, labels: np.ndarray, hw: tuple[int, int],
                  min_area: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
    """Clip to the image and drop boxes below min_area px^2."""
    h, w = hw
    boxes = boxes.astype(np.float32).reshape(-1, 4)
    boxes[:, 0::2] = np.clip(boxes[:, 0::2], 0, w)
    boxes[:, 1::2] = np.clip(boxes[:, 1::2], 0, h)
    area = (boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])
    keep = area >= min_area
    return boxes[keep], labels[keep]


def mixup(a: Sample, b: Sample, lam: float | None = None,
          rng: np.random.Generator | None = None) -> Sample:
    """Blend two same-size samples; boxes and labels are the union."""
    if a.image.shape != b.image.shape:
        raise ValueError(f"mixup: size mismatch {a.image.shape} vs {b.image.shape}")
    if lam is None:
        lam = float((rng or np.random.default_rng()).beta(8.0, 8.0))
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"mixup coefficient must be in [0,1], got {lam}")
    image = (lam * a.image + (1.0 - lam) * b.image).astype(np.float32)
    boxes = np.concatenate([a.boxes, b.boxes], axis=0)
    labels = np.concatenate([a.labels, b.labels], axis=0)
    return Sample(image, boxes, labels)


def mosaic(samples: list[Sample], out_size: tuple[int, int] | None = None,
           center: tuple[int, int] | None = None,
           rng: np.random.Generator | None = None) -> Sample:
    """2x2 grid of four samples around a center point.

    Default canvas is twice the first sample; each tile is placed with its
    corner at the center and cropped where it overflows its quadrant. With the
    center at the exact middle each tile is one full image.
    """
    if len(samples) != 4:
        raise ValueError(f"mosaic needs exactly 4 samples, got {len(samples)}")
    h0, w0 = samples[0].hw
    oh, ow = out_size if out_size is not None else (2 * h0, 2 * w0)
    if center is None:
        r = rng or np.random.default_rng()
        cx = int(r.integers(ow // 4, 3 * ow // 4 + 1))
        cy = int(r.integers(oh // 4, 3 * oh // 4 + 1))
    else:
        cx, cy = center
    canvas = np.full((3, oh, ow), FILL_VALUE, dtype=np.float32)
    all_boxes, all_labels = [], []
    # (x range, y range) of each quadrant; the tile corner touching (cx,cy)
    quads = [
        ((0, cx), (0, cy), "br"), ((cx, ow), (0, cy), "bl"),
        ((0, cx), (cy, oh), "tr"), ((cx, ow), (cy, oh), "tl"),
    ]
    for s, ((qx1, qx2), (qy1, qy2), corner) in zip(samples, quads):
        h, w = s.hw
        tw, th = min(w, qx2 - qx1), min(h, qy2 - qy1)
        if tw <= 0 or th <= 0:
            continue
        # source crop hugging the corner nearest the canvas center
        sx1 = w - tw if corner in ("br", "tr") else 0
        sy1 = h - th if corner in ("br", "bl") else 0
        dx1 = qx2 - tw if corner in ("br", "tr") else qx1
        dy1 = qy2 - th if corner in ("br", "bl") else qy1
        canvas[:, dy1 : dy1 + th, dx1 : dx1 + tw] = s.image[:, sy1 : sy1 + th, sx1 : sx1 + tw]
        if len(s.boxes):
            shifted = s.boxes.copy()
            shifted[:, 0::2] += dx1 - sx1
            shifted[:, 1::2] += dy1 - sy1
            shifted[:, 0::2] = np.clip(shifted[:, 0::2], dx1, dx1 + tw)
            shifted[:, 1::2] = np.clip(shifted[:, 1::2], dy1, dy1 + th)
            all_boxes.append(shifted)
            all_labels.append(s.labels)
    boxes = np.concatenate(all_boxes, axis=0) if all_boxes else np.zeros((0, 4), np.float32)
    labels = np.concatenate(all_labels, axis=0) if all_labels else np.zeros((0,), np.int64)
    boxes, labels = _finish_boxes(boxes, labels, (oh, ow))
    return Sample(canvas, boxes, labels)


def hflip(s: Sample) -> Sample:
    """Mirror in x: x1' = W - x2, x2' = W - x1 (an involution)."""
    h, w = s.hw
    image = np.ascontiguousarray(s.image[:, :, ::-1])
    boxes = s.boxes.copy()
    if len(boxes):
        boxes[:, 0], boxes[:, 2] = w - s.boxes[:, 2], w - s.boxes[:, 0]
    return Sample(image, boxes, s.labels.copy())


def _bilinear(image: np.ndarray, ys: np.ndarray, xs: np.ndarray,
              fill: float = FILL_VALUE) -> np.ndarray:
    """Sample CHW image at float coords (same-shaped ys/xs grids)."""
    _, h, w = image.shape
    inside = (ys >= 0) & (ys <= h - 1) & (xs >= 0) & (xs <= w - 1)
    y0 = np.clip(np.floor(ys), 0, h - 1).astype(np.int64)
    x0 = np.clip(np.floor(xs), 0, w - 1).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = np.clip(ys, 0, h - 1) - y0
    fx = np.clip(xs, 0, w - 1) - x0
    out = (image[:, y0, x0] * (1 - fy) * (1 - fx) + image[:, y1, x0] * fy * (1 - fx)
           + image[:, y0, x1] * (1 - fy) * fx + image[:, y1, x1] * fy * fx)
    return np.where(inside[None], out, fill).astype(np.float32)


def resize_sample(s: Sample, factor: float) -> Sample:
    """Bilinear resize of image and boxes by one scale factor."""
    if factor <= 0:
        raise ValueError(f"scale factor must be positive, got {factor}")
    h, w = s.hw
    oh, ow = max(1, round(h * factor)), max(1, round(w * factor))
    if (oh, ow) == (h, w):
        return s.copy()
    ys = (np.arange(oh, dtype=np.float64) + 0.5) * (h / oh) - 0.5
    xs = (np.arange(ow, dtype=np.float64) + 0.5) * (w / ow) - 0.5
    gy, gx = np.meshgrid(ys, xs, indexing="ij")
    image = _bilinear(s.image, gy, gx)
    boxes = s.boxes.copy()
    if len(boxes):
        boxes[:, 0::2] *= ow / w
        boxes[:, 1::2] *= oh / h
    boxes, labels = _finish_boxes(boxes, s.labels.copy(), (oh, ow))
    return Sample(image, boxes, labels)


def random_scale(s: Sample, scale_range: tuple[float, float] = (0.75, 1.25),
                 rng: np.random.Generator | None = None) -> Sample:
    lo, hi = scale_range
    if lo <= 0 or hi <= 0:
        raise ValueError(f"degenerate scale range {scale_range}")
    factor = float((rng or np.random.default_rng()).uniform(lo, hi))
    return resize_sample(s, factor)


def random_affine(s: Sample, degrees: float = 10.0, translate: float = 0.1,
                  scale_range: tuple[float, float] = (0.9, 1.1), shear: float = 2.0,
                  rng: np.random.Generator | None = None,
                  params: tuple[float, float, float, float, float] | None = None) -> Sample:
    """Rotate/scale/shear/translate about the image center (bilinear).

    Box corners are mapped forward and re-axis-aligned. ``params`` pins
    (angle_deg, scale, shear_deg, tx_px, ty_px) for deterministic tests.
    """
    h, w = s.hw
    if params is None:
        r = rng or np.random.default_rng()
        angle = float(r.uniform(-degrees, degrees))
        scale = float(r.uniform(*scale_range))
        sh = float(r.uniform(-shear, shear))
        tx = float(r.uniform(-translate, translate) * w)
        ty = float(r.uniform(-translate, translate) * h)
    else:
        angle, scale, sh, tx, ty = params
    if scale <= 0:
        raise ValueError(f"degenerate affine scale {scale}")
    a = np.deg2rad(angle)
    m = np.deg2rad(sh)
    rot = np.array([[np.cos(a), -np.sin(a)], [np.sin(a), np.cos(a)]])
    shm = np.array([[1.0, np.tan(m)], [0.0, 1.0]])
    fwd = scale * (rot @ shm)
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    center = np.array([cx, cy])
    shift = np.array([tx, ty])
    inv = np.linalg.inv(fwd)
    gy, gx = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    rel = np.stack([gx - cx - shift[0], gy - cy - shift[1]])
    src = np.tensordot(inv, rel, axes=(1, 0))
    image = _bilinear(s.image, src[1] + cy, src[0] + cx)
    boxes_out = np.zeros_like(s.boxes)
    if len(s.boxes):
        x1, y1, x2, y2 = s.boxes[:, 0], s.boxes[:, 1], s.boxes[:, 2], s.boxes[:, 3]
        corners = np.stack([
            np.stack([x1, y1], -1), np.stack([x2, y1], -1),
            np.stack([x1, y2], -1), np.stack([x2, y2], -1),
        ], axis=1)  # (K,4,2)
        mapped = (corners - center) @ fwd.T + center + shift
        boxes_out = np.concatenate([mapped.min(axis=1), mapped.max(axis=1)], axis=1)
    boxes, labels = _finish_boxes(boxes_out, s.labels.copy(), (h, w))
    return Sample(image, boxes, labels)


def fit_to(s: Sample, hw: tuple[int, int]) -> Sample:
    """Center-crop or pad (fill value) to an exact size; boxes follow."""
    th, tw = hw
    h, w = s.hw
    if (h, w) == (th, tw):
        return s
    canvas = np.full((3, th, tw), FILL_VALUE, dtype=np.float32)
    dy, dx = (th - h) // 2, (tw - w) // 2
    sy, sx = max(0, -dy), max(0, -dx)
    ty, tx = max(0, dy), max(0, dx)
    ch, cw = min(h - sy, th - ty), min(w - sx, tw - tx)
    canvas[:, ty : ty + ch, tx : tx + cw] = s.image[:, sy : sy + ch, sx : sx + cw]
    boxes = s.boxes.copy()
    if len(boxes):
        boxes[:, 0::2] += dx
        boxes[:, 1::2] += dy
    boxes, labels = _finish_boxes(boxes, s.labels.copy(), (th, tw))
    return Sample(canvas, boxes, labels)

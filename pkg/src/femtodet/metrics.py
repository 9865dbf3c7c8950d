"""Average-precision evaluation (101-point interpolation at one IoU threshold).

Matching is the usual greedy scheme: predictions in descending score order,
each taking the unmatched ground truth of highest IoU >= threshold. Equal
scores are ordered by (image index, box coordinates, class), so the result is
invariant under any reordering of the input predictions.

Size buckets follow the usual area splits (small < 32^2 <= medium < 96^2 <=
large); ground truths outside the bucket are ignored, predictions matched to
ignored truths (or unmatched with out-of-bucket area) count as neither hit
nor false alarm.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .model import Detection, box_iou_matrix

AREA_BUCKETS = {
    "all": (0.0, float("inf")),
    "small": (0.0, 32.0 ** 2),
    "medium": (32.0 ** 2, 96.0 ** 2),
    "large": (96.0 ** 2, float("inf")),
}


@dataclass
class APResult:
    ap: float
    ar: float
    per_class: dict[int, float] = field(default_factory=dict)
    ap_small: float = 0.0
    ap_medium: float = 0.0
    ap_large: float = 0.0
    iou_thresh: float = 0.5


def _interp_ap(recall: np.ndarray, precision: np.ndarray) -> float:
    """101-point interpolated AP: mean over r in {0,.01,..,1} of max precision
    among points with recall >= r."""
    if recall.size == 0:
        return 0.0
    order = np.argsort(recall, kind="stable")
    recall = recall[order]
    precision = precision[order]
    # precision envelope from the right
    env = np.maximum.accumulate(precision[::-1])[::-1]
    points = np.linspace(0.0, 1.0, 101)
    idx = np.searchsorted(recall, points, side="left")
    vals = np.where(idx < recall.size, env[np.minimum(idx, recall.size - 1)], 0.0)
    return float(vals.mean())


def _box_area(box) -> float:
    return float(max(0.0, box[2] - box[0]) * max(0.0, box[3] - box[1]))


def _eval_class(preds, gts, iou_thresh: float, area_range) -> tuple[float, float] | None:
    """AP and max recall for one class in one area bucket; None if no
    in-bucket ground truth exists."""
    lo, hi = area_range
    gt_boxes = []
    gt_ignored = []
    gt_offsets = []
    total = 0
    n_gt = 0
    for boxes in gts:
        gt_offsets.append(total)
        for b in boxes:
            area = _box_area(b)
            ignored = not (lo <= area < hi)
            gt_boxes.append(b)
            gt_ignored.append(ignored)
            n_gt += 0 if ignored else 1
            total += 1
    if n_gt == 0:
        return None
    # deterministic score order regardless of input ordering
    flat = []
    for img_idx, dets in enumerate(preds):
        for d in dets:
            flat.append((-d.score, img_idx, tuple(d.box)))
    flat.sort()
    matched = [False] * total
    tp, fp = [], []
    for _neg_score, img_idx, box in flat:
        cand = range(gt_offsets[img_idx],
                     gt_offsets[img_idx + 1] if img_idx + 1 < len(gt_offsets) else total)
        best, best_iou = -1, -1.0
        ignored_hit = False
        for gi in cand:
            if matched[gi]:
                continue
            iou = float(box_iou_matrix(np.array(box), np.array(gt_boxes[gi]))[0, 0])
            if iou < iou_thresh:
                continue
            if gt_ignored[gi]:
                ignored_hit = True
            elif iou > best_iou:
                best, best_iou = gi, iou
        if best >= 0:
            matched[best] = True
            tp.append(1.0)
            fp.append(0.0)
        elif ignored_hit or not (lo <= _box_area(box) < hi):
            continue  # neither hit nor false alarm
        else:
            tp.append(0.0)
            fp.append(1.0)
    if not tp:
        return 0.0, 0.0
    tp_c = np.cumsum(tp)
    fp_c = np.cumsum(fp)
    recall = tp_c / n_gt
    precision = tp_c / np.maximum(tp_c + fp_c, 1e-12)
    return _interp_ap(recall, precision), float(recall[-1]) if recall.size else 0.0


def evaluate_ap(preds_per_image: list[list[Detection]],
                gts_per_image: list[tuple[np.ndarray, np.ndarray]],
                iou_thresh: float = 0.5) -> APResult:
    """Mean AP over classes plus mean max-recall and size-bucketed APs.

    gts_per_image holds (boxes (K,4), labels (K,)) per image; classes come
    from the union of prediction and ground-truth labels.
    """
    if not 0.0 < iou_thresh < 1.0:
        raise ValueError(f"iou_thresh must be in (0,1), got {iou_thresh}")
    classes = set()
    for boxes, labels in gts_per_image:
        classes.update(int(c) for c in np.asarray(labels).reshape(-1))
    for dets in preds_per_image:
        classes.update(d.class_id for d in dets)

    def bucket_ap(area_range) -> tuple[float, float, dict[int, float]]:
        aps, ars, per_class = [], [], {}
        for c in sorted(classes):
            preds_c = [[d for d in dets if d.class_id == c] for dets in preds_per_image]
            gts_c = [np.asarray(boxes).reshape(-1, 4)[np.asarray(labels).reshape(-1) == c]
                     for boxes, labels in gts_per_image]
            res = _eval_class(preds_c, gts_c, iou_thresh, area_range)
            if res is None:
                continue
            ap, ar = res
            per_class[c] = ap
            aps.append(ap)
            ars.append(ar)
        if not aps:
            return 0.0, 0.0, per_class
        return float(np.mean(aps)), float(np.mean(ars)), per_class

    ap, ar, per_class = bucket_ap(AREA_BUCKETS["all"])
    ap_s, _, _ = bucket_ap(AREA_BUCKETS["small"])
    ap_m, _, _ = bucket_ap(AREA_BUCKETS["medium"])
    ap_l, _, _ = bucket_ap(AREA_BUCKETS["large"])
    return APResult(ap=ap, ar=ar, per_class=per_class, ap_small=ap_s, ap_medium=ap_m,
                    ap_large=ap_l, iou_thresh=iou_thresh)

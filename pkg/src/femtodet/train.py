"""Staged training with recursive warm restarts, plus the toy trainer.

The canonical schedule has four stages whose augmentation sets strictly
shrink; each stage starts from the previous stage's checkpoint with a fresh
optimizer and the learning rate restarted at its peak (cosine decay within a
stage). The last stage keeps only horizontal flips and random scales.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .augment import Sample, fit_to, hflip, mixup, mosaic, random_affine, random_scale, resize_sample
from .dataset import ToyDataConfig, generate_split
from .metrics import APResult, evaluate_ap
from .model import Detection, FemtoNet, HeadMaps, ModelConfig, decode_boxes
from .tensor import (
    Tensor,
    bce_with_logits,
    exp,
    maximum,
    minimum,
    no_grad,
    relu,
    slice_channels,
)

AUG_MIXUP = "MixUp"
AUG_MOSAIC = "Mosaic"
AUG_AFFINE = "RandomAffine"
AUG_HFLIP = "HFlip"
AUG_SCALE = "RandomScale"
FULL_AUG_SET = (AUG_MIXUP, AUG_MOSAIC, AUG_AFFINE, AUG_HFLIP, AUG_SCALE)
FINAL_AUG_SET = (AUG_HFLIP, AUG_SCALE)


class NumericError(RuntimeError):
    """Training hit a non-finite loss; message carries diagnostics."""


@dataclass
class StageConfig:
    augmentations: tuple[str, ...]
    epochs: int
    lr: float
    init_from: str  # "scratch" | "previous"

    def __post_init__(self):
        unknown = set(self.augmentations) - set(FULL_AUG_SET)
        if unknown:
            raise ValueError(f"unknown augmentations {sorted(unknown)}")
        if self.init_from not in ("scratch", "previous"):
            raise ValueError(f"init_from must be scratch or previous, got {self.init_from!r}")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")


@dataclass
class RecWRSchedule:
    """Exactly four stages with strictly shrinking augmentation sets."""

    stages: list[StageConfig]

    def __post_init__(self):
        if len(self.stages) != 4:
            raise ValueError(f"schedule must have exactly 4 stages, got {len(self.stages)}")
        sets = [set(s.augmentations) for s in self.stages]
        if not sets[0] >= set(FULL_AUG_SET):
            raise ValueError("stage 1 must include the full augmentation set")
        for k in range(1, 4):
            if not sets[k] < sets[k - 1]:
                raise ValueError(f"stage {k + 1} augmentations must be a strict subset of stage {k}")
            if self.stages[k].init_from != "previous":
                raise ValueError(f"stage {k + 1} must initialize from the previous stage")
        if sets[3] != set(FINAL_AUG_SET):
            raise ValueError(f"stage 4 must be exactly {set(FINAL_AUG_SET)}")


def build_recwr_schedule(epochs_per_stage: tuple[int, int, int, int] = (2, 2, 2, 2),
                         base_lr: float = 0.1) -> RecWRSchedule:
    """Drop order: MixUp first (most harmful to tiny detectors), then Mosaic,
    then RandomAffine."""
    for e in epochs_per_stage:
        if e <= 0:
            raise ValueError("epoch counts must be positive")
    sets = [
        FULL_AUG_SET,
        (AUG_MOSAIC, AUG_AFFINE, AUG_HFLIP, AUG_SCALE),
        (AUG_AFFINE, AUG_HFLIP, AUG_SCALE),
        FINAL_AUG_SET,
    ]
    stages = [
        StageConfig(sets[k], epochs_per_stage[k], base_lr, "scratch" if k == 0 else "previous")
        for k in range(4)
    ]
    return RecWRSchedule(stages)


def build_flat_stages(epochs: int, base_lr: float = 0.1, with_mixup: bool = False) -> list[StageConfig]:
    """Single-stage baseline; stage-2 augmentations by default, the full
    stage-1 set (MixUp included) when with_mixup."""
    augs = FULL_AUG_SET if with_mixup else (AUG_MOSAIC, AUG_AFFINE, AUG_HFLIP, AUG_SCALE)
    return [StageConfig(augs, epochs, base_lr, "scratch")]


def recwr1_stages(epochs_per_stage: tuple[int, int, int] = (2, 2, 2),
                  base_lr: float = 0.1) -> list[StageConfig]:
    """The no-MixUp variant: the canonical schedule's last three stages."""
    tail = build_recwr_schedule((1, *epochs_per_stage), base_lr).stages[1:]
    tail[0] = StageConfig(tail[0].augmentations, tail[0].epochs, tail[0].lr, "scratch")
    return tail


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


class SGD:
    """SGD with classical momentum: v = mu*v + g; p -= lr*v.

    Gradients are globally norm-clipped (guards the first warm steps)."""

    def __init__(self, params: list[Tensor], lr: float, momentum: float = 0.9,
                 max_grad_norm: float | None = 10.0):
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.max_grad_norm = max_grad_norm
        self.velocities = [np.zeros_like(p.data) for p in params]

    def reset(self):
        for v in self.velocities:
            v[...] = 0.0

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        clip = 1.0
        if self.max_grad_norm is not None:
            sq = 0.0
            for p in self.params:
                if p.grad is not None:
                    sq += float((p.grad.astype(np.float64) ** 2).sum())
            norm = float(np.sqrt(sq))
            if norm > self.max_grad_norm > 0:
                clip = self.max_grad_norm / norm
        for p, v in zip(self.params, self.velocities):
            if p.grad is None:
                continue
            v *= self.momentum
            v += clip * p.grad
            p.data = (p.data - self.lr * v).astype(p.data.dtype)


def cosine_lr(peak: float, step: int, total: int) -> float:
    """Cosine decay from the peak over a stage; restarts at the peak each stage."""
    if total <= 1:
        return peak
    return float(0.5 * peak * (1.0 + np.cos(np.pi * step / (total - 1))))


# ---------------------------------------------------------------------------
# targets and loss
# ---------------------------------------------------------------------------


def build_targets(samples: list[Sample], grid_hw: tuple[int, int], stride: int,
                  num_classes: int):
    """Single positive cell per ground truth (the one holding its center)."""
    b = len(samples)
    gh, gw = grid_hw
    obj_t = np.zeros((b, 1, gh, gw), dtype=np.float32)
    cls_t = np.zeros((b, num_classes, gh, gw), dtype=np.float32)
    gt_boxes = np.zeros((b, 4, gh, gw), dtype=np.float32)
    for bi, s in enumerate(samples):
        for box, label in zip(s.boxes, s.labels):
            cx = (box[0] + box[2]) / 2.0
            cy = (box[1] + box[3]) / 2.0
            j = min(gw - 1, max(0, int(cx // stride)))
            i = min(gh - 1, max(0, int(cy // stride)))
            obj_t[bi, 0, i, j] = 1.0
            cls_t[bi, :, i, j] = 0.0
            cls_t[bi, int(label), i, j] = 1.0
            gt_boxes[bi, :, i, j] = box
    return obj_t, cls_t, gt_boxes


def detection_loss(maps: HeadMaps, obj_t: np.ndarray, cls_t: np.ndarray,
                   gt_boxes: np.ndarray, stride: int, iou_weight: float = 2.0):
    """BCE on objectness (all cells) + BCE on class and IoU loss (positives)."""
    b, _, gh, gw = maps.obj.shape
    n_pos = max(1.0, float(obj_t.sum()))
    pos_mask = Tensor(obj_t)

    obj_loss = bce_with_logits(maps.obj, obj_t).mean()
    cls_loss = (bce_with_logits(maps.cls, cls_t) * pos_mask).sum() * (1.0 / n_pos)

    jj, ii = np.meshgrid(np.arange(gw, dtype=np.float32), np.arange(gh, dtype=np.float32))
    jj = Tensor(np.broadcast_to(jj, (b, 1, gh, gw)).copy())
    ii = Tensor(np.broadcast_to(ii, (b, 1, gh, gw)).copy())
    dx = slice_channels(maps.box, 0, 1)
    dy = slice_channels(maps.box, 1, 2)
    dw = slice_channels(maps.box, 2, 3)
    dh = slice_channels(maps.box, 3, 4)
    cx = (jj + dx) * float(stride)
    cy = (ii + dy) * float(stride)
    pw = exp(dw) * float(stride)
    ph = exp(dh) * float(stride)
    px1 = cx - pw * 0.5
    py1 = cy - ph * 0.5
    px2 = cx + pw * 0.5
    py2 = cy + ph * 0.5
    gx1 = Tensor(gt_boxes[:, 0:1])
    gy1 = Tensor(gt_boxes[:, 1:2])
    gx2 = Tensor(gt_boxes[:, 2:3])
    gy2 = Tensor(gt_boxes[:, 3:4])
    iw = relu(minimum(px2, gx2) - maximum(px1, gx1))
    ih = relu(minimum(py2, gy2) - maximum(py1, gy1))
    inter = iw * ih
    union = pw * ph + (gx2 - gx1) * (gy2 - gy1) - inter + 1e-9
    iou = inter / union
    iou_loss = ((1.0 - iou) * pos_mask).sum() * (iou_weight / n_pos)
    total = obj_loss + cls_loss + iou_loss
    parts = {"obj": float(obj_loss.data), "cls": float(cls_loss.data), "iou": float(iou_loss.data)}
    return total, parts


# ---------------------------------------------------------------------------
# augmentation pipeline
# ---------------------------------------------------------------------------


def augment_sample(dataset: list[Sample], idx: int, augs: set[str], out_hw: tuple[int, int],
                   rng: np.random.Generator) -> Sample:
    """Apply the stage's augmentation set in canonical order, ending at out_hw."""
    s = dataset[idx]
    if AUG_MOSAIC in augs:
        others = [dataset[int(j)] for j in rng.integers(0, len(dataset), size=3)]
        s = resize_sample(mosaic([s, *others], rng=rng), 0.5)
    if AUG_MIXUP in augs:
        partner = dataset[int(rng.integers(0, len(dataset)))]
        s = mixup(s, partner, lam=float(rng.beta(8.0, 8.0)))
    if AUG_AFFINE in augs:
        s = random_affine(s, degrees=8.0, translate=0.08, scale_range=(0.9, 1.1), shear=2.0, rng=rng)
    if AUG_HFLIP in augs and rng.random() < 0.5:
        s = hflip(s)
    if AUG_SCALE in augs:
        s = random_scale(s, (0.8, 1.25), rng=rng)
    if s.hw != out_hw:
        s = fit_to(s, out_hw)
    s.image = np.clip(s.image, 0.0, 1.0)
    return s


# ---------------------------------------------------------------------------
# training state
# ---------------------------------------------------------------------------


@dataclass
class TrainState:
    net: FemtoNet
    stages: list[StageConfig]
    optimizer: SGD
    stage_index: int = 0
    global_step: int = 0
    checkpoints: dict[int, dict[str, np.ndarray]] = field(default_factory=dict)
    logs: list[str] = field(default_factory=list)
    loss_history: list[float] = field(default_factory=list)
    ap_history: list[float] = field(default_factory=list)

    @property
    def finished(self) -> bool:
        return self.stage_index >= len(self.stages)


def advance_stage(state: TrainState) -> TrainState:
    """Move to the next stage: weights from the previous checkpoint, fresh
    optimizer buffers, augmentations swapped by the caller's stage lookup."""
    nxt = state.stage_index + 1
    if nxt >= len(state.stages):
        raise RuntimeError(f"no stage after {nxt} (schedule has {len(state.stages)})")
    if state.stages[nxt].init_from == "previous":
        if state.stage_index not in state.checkpoints:
            raise RuntimeError(f"no checkpoint recorded for stage {state.stage_index + 1}")
        state.net.load_state(state.checkpoints[state.stage_index])
    state.optimizer.reset()
    state.optimizer.zero_grad()
    state.stage_index = nxt
    return state


def predict_dataset(net: FemtoNet, samples: list[Sample], stride: int,
                    score_thresh: float = 0.05, nms_iou: float = 0.5,
                    batch_size: int = 16) -> list[list[Detection]]:
    prev_mode = net.mode
    net.set_mode("eval")
    preds: list[list[Detection]] = []
    with no_grad():
        for start in range(0, len(samples), batch_size):
            chunk = samples[start : start + batch_size]
            images = np.stack([s.image for s in chunk])
            maps = net.forward(Tensor(images))
            for bi, s in enumerate(chunk):
                preds.append(decode_boxes(maps, stride, score_thresh, nms_iou,
                                          image_size=s.hw, index=bi))
    net.set_mode(prev_mode)
    return preds


def evaluate_model(net: FemtoNet, samples: list[Sample], stride: int,
                   iou_thresh: float = 0.5) -> APResult:
    preds = predict_dataset(net, samples, stride)
    gts = [(s.boxes, s.labels) for s in samples]
    return evaluate_ap(preds, gts, iou_thresh)


def train_toy(net: FemtoNet, stages: list[StageConfig], data_cfg: ToyDataConfig, seed: int,
              batch_size: int = 8, max_steps: int | None = None, momentum: float = 0.9,
              iou_weight: float = 2.0, out_dir: str | None = None,
              eval_every_epoch: bool = True) -> TrainState:
    """Run all stages over the synthetic dataset with SGD + momentum.

    Deterministic for a fixed seed (single-threaded); logs one line per epoch
    with the mean loss and the validation AP at IoU 0.5. Non-finite loss
    aborts with diagnostics.
    """
    train_set = generate_split(data_cfg, "train")
    val_set = generate_split(data_cfg, "val")
    out_hw = (data_cfg.image_size, data_cfg.image_size)
    stride = net.out_stride
    gh, gw = out_hw[0] // stride, out_hw[1] // stride
    rng = np.random.default_rng(np.random.SeedSequence([seed, 17]))

    optimizer = SGD(net.trainable_params(), lr=stages[0].lr, momentum=momentum)
    state = TrainState(net=net, stages=stages, optimizer=optimizer)
    net.set_mode("train")
    steps_per_epoch = max(1, len(train_set) // batch_size)
    stopped = False

    for k, stage in enumerate(stages):
        if k > 0:
            advance_stage(state)
        augs = set(stage.augmentations)
        total_stage_steps = max(1, stage.epochs * steps_per_epoch)
        stage_step = 0
        for epoch in range(stage.epochs):
            order = rng.permutation(len(train_set))
            epoch_losses = []
            for b_start in range(0, steps_per_epoch * batch_size, batch_size):
                if max_steps is not None and state.global_step >= max_steps:
                    stopped = True
                    break
                idxs = order[b_start : b_start + batch_size]
                batch = [augment_sample(train_set, int(i), augs, out_hw, rng) for i in idxs]
                images = np.stack([s.image for s in batch])
                obj_t, cls_t, gt_boxes = build_targets(batch, (gh, gw), stride,
                                                       net.cfg.num_classes)
                maps = net.forward(Tensor(images))
                loss, parts = detection_loss(maps, obj_t, cls_t, gt_boxes, stride, iou_weight)
                loss_val = float(loss.data)
                if not np.isfinite(loss_val):
                    raise NumericError(
                        f"non-finite loss at stage={k + 1} step={state.global_step} "
                        f"parts={parts}")
                optimizer.zero_grad()
                loss.backward()
                optimizer.lr = cosine_lr(stage.lr, stage_step, total_stage_steps)
                optimizer.step()
                state.loss_history.append(loss_val)
                epoch_losses.append(loss_val)
                state.global_step += 1
                stage_step += 1
            mean_loss = float(np.mean(epoch_losses)) if epoch_losses else float("nan")
            if eval_every_epoch:
                ap = evaluate_model(net, val_set, stride).ap
                state.ap_history.append(ap)
            else:
                ap = float("nan")
            state.logs.append(
                f"stage={k + 1} epoch={epoch + 1} step={state.global_step} "
                f"loss={mean_loss!r} ap50={ap!r}")
            if stopped:
                break
        state.checkpoints[k] = net.state_dict()
        if out_dir is not None:
            from .archive import save_model  # local import: archive depends on model

            os.makedirs(out_dir, exist_ok=True)
            save_model(os.path.join(out_dir, f"stage{k + 1}.femto"), net,
                       extra={"train.stage_index": np.array([float(k + 1)], np.float32)})
        if stopped:
            break
    return state


def mixup_ablation(net_builder, data_cfg: ToyDataConfig, seed: int,
                   epochs_per_stage: int = 1, base_lr: float = 0.1,
                   batch_size: int = 8, max_steps: int | None = None) -> list[tuple[str, float]]:
    """Tiny-scale comparison table of the four training regimes.

    Rows: full schedule (with MixUp), the no-MixUp 3-stage variant, flat
    training on stage-2 augmentations, and flat training with MixUp. The
    result ordering is stochastic at this scale and not asserted anywhere.
    """
    e = epochs_per_stage
    regimes = [
        ("recwr", build_recwr_schedule((e, e, e, e), base_lr).stages),
        ("recwr1", recwr1_stages((e, e, e), base_lr)),
        ("flat", build_flat_stages(4 * e, base_lr, with_mixup=False)),
        ("flat_mixup", build_flat_stages(4 * e, base_lr, with_mixup=True)),
    ]
    rows = []
    for name, stages in regimes:
        net = net_builder()
        state = train_toy(net, stages, data_cfg, seed, batch_size=batch_size,
                          max_steps=max_steps, eval_every_epoch=False)
        ap = evaluate_model(net, generate_split(data_cfg, "val"), net.out_stride).ap
        rows.append((name, ap))
    return rows

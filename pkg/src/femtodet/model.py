"""Network assembly: row-table backbone, shared fusion neck, decoupled head.

The backbone follows a MobileNetV2-style row table (expansion factor t,
output channels c, repeats n, first-repeat stride s); an unset t marks the
initial vanilla conv row. With ``use_ibe`` each block's spatial+projection
stage is a boundary-enhancement module instead of plain dw+pw.

The neck channel-aligns the tapped stage outputs with pointwise convs,
upsamples everything to the largest tapped resolution, sums, and fuses with a
single DSC. The head is a decoupled pair of DSC branches producing class
logits, objectness and box regression over one grid.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import yaml

from . import fold as fold_ops
from .ibe import IBEModule, ibe_forward, make_ibe, set_ibe_mode
from .tensor import (
    BatchNormParams,
    ConvSpec,
    ShapeError,
    Tensor,
    add,
    batch_norm,
    concat_channels,
    conv_forward,
    make_batch_norm,
    make_conv,
    relu,
    upsample_nearest,
)

# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


@dataclass
class BackboneRow:
    """One table row; t unset means a plain (vanilla) conv row."""

    t: int | None
    c: int
    n: int
    s: int

    def __post_init__(self):
        if self.t is not None and self.t < 1:
            raise ValueError(f"expansion factor must be >= 1, got {self.t}")
        if self.s not in (1, 2):
            raise ValueError(f"stride must be 1 or 2, got {self.s}")
        if self.c < 1 or self.n < 1:
            raise ValueError("channels and repeats must be positive")


@dataclass
class ModelConfig:
    input_size: tuple[int, int]
    backbone: list[BackboneRow]
    neck_channels: int
    neck_taps: list[int]
    num_classes: int
    head_width: int
    use_ibe: bool

    def __post_init__(self):
        n_stages = len(self.backbone)
        for tap in self.neck_taps:
            if not 0 <= tap < n_stages:
                raise ValueError(f"neck tap {tap} out of range for {n_stages} stages")
        stride = 1
        for row in self.backbone:
            stride *= row.s
        for dim in self.input_size:
            if dim % stride:
                raise ValueError(f"input dim {dim} not divisible by total stride {stride}")

    def to_dict(self) -> dict:
        return {
            "input_size": list(self.input_size),
            "backbone": [{"t": r.t, "c": r.c, "n": r.n, "s": r.s} for r in self.backbone],
            "neck_channels": self.neck_channels,
            "neck_taps": list(self.neck_taps),
            "num_classes": self.num_classes,
            "head_width": self.head_width,
            "use_ibe": self.use_ibe,
        }

    @staticmethod
    def from_dict(d: dict) -> "ModelConfig":
        return ModelConfig(
            input_size=tuple(d["input_size"]),
            backbone=[BackboneRow(r.get("t"), r["c"], r["n"], r["s"]) for r in d["backbone"]],
            neck_channels=d["neck_channels"],
            neck_taps=list(d["neck_taps"]),
            num_classes=d["num_classes"],
            head_width=d["head_width"],
            use_ibe=bool(d["use_ibe"]),
        )

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    @staticmethod
    def from_yaml(text: str) -> "ModelConfig":
        return ModelConfig.from_dict(yaml.safe_load(text))


def default_config(input_size: tuple[int, int] = (640, 640), num_classes: int = 20,
                   use_ibe: bool = True) -> ModelConfig:
    """The stock detector: 1 vanilla conv + 13 DSC layers, taps at strides 16/32."""
    rows = [
        BackboneRow(None, 8, 1, 2),
        BackboneRow(1, 8, 1, 1),
        BackboneRow(4, 8, 2, 2),
        BackboneRow(4, 8, 2, 2),
        BackboneRow(4, 16, 3, 2),
        BackboneRow(4, 24, 2, 1),
        BackboneRow(4, 40, 2, 2),
        BackboneRow(4, 80, 1, 1),
    ]
    return ModelConfig(
        input_size=input_size,
        backbone=rows,
        neck_channels=24,
        neck_taps=[5, 7],
        num_classes=num_classes,
        head_width=24,
        use_ibe=use_ibe,
    )


def load_config(path) -> ModelConfig:
    with open(path, "r", encoding="utf-8") as f:
        return ModelConfig.from_yaml(f.read())


def save_config(cfg: ModelConfig, path):
    with open(path, "w", encoding="utf-8") as f:
        f.write(cfg.to_yaml())


# ---------------------------------------------------------------------------
# state references (serialization glue)
# ---------------------------------------------------------------------------


class StateRef:
    """Named handle onto a parameter tensor or a batch-norm running buffer."""

    def __init__(self, tensor: Tensor | None = None, owner=None, attr: str | None = None):
        self._tensor = tensor
        self._owner = owner
        self._attr = attr

    @property
    def trainable(self) -> bool:
        return self._tensor is not None and self._tensor.requires_grad

    @property
    def tensor(self) -> Tensor | None:
        return self._tensor

    def get(self) -> np.ndarray:
        if self._tensor is not None:
            return self._tensor.data
        return getattr(self._owner, self._attr)

    def set(self, arr: np.ndarray):
        cur = self.get()
        if arr.shape != cur.shape:
            raise ShapeError(f"state shape mismatch: {arr.shape} != {cur.shape}")
        if self._tensor is not None:
            self._tensor.data = arr.astype(cur.dtype)
        else:
            setattr(self._owner, self._attr, arr.astype(cur.dtype))


def _bn_state(name: str, bn: BatchNormParams) -> list[tuple[str, StateRef]]:
    return [
        (f"{name}.gamma", StateRef(bn.gamma)),
        (f"{name}.beta", StateRef(bn.beta)),
        (f"{name}.mean", StateRef(owner=bn, attr="running_mean")),
        (f"{name}.var", StateRef(owner=bn, attr="running_var")),
    ]


@dataclass
class CostItem:
    """One layer's contribution to the analytical cost model (elements, not bytes)."""

    name: str
    macs: int
    read_elems: int
    write_elems: int


def _conv_out_hw(hw: tuple[int, int], kernel: tuple[int, int], stride: int, padding: int):
    h, w = hw
    return ((h + 2 * padding - kernel[0]) // stride + 1,
            (w + 2 * padding - kernel[1]) // stride + 1)


def _conv_macs(spec: ConvSpec, out_hw: tuple[int, int], batch: int) -> int:
    out_elems = batch * spec.out_channels * out_hw[0] * out_hw[1]
    return out_elems * spec.kernel[0] * spec.kernel[1] * (spec.in_channels // spec.groups)


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------


class ConvBNAct:
    """conv -> optional batch norm -> optional ReLU."""

    def __init__(self, spec: ConvSpec, bn: BatchNormParams | None, act: bool, name: str = "conv"):
        self.spec = spec
        self.bn = bn
        self.act = act
        self.name = name

    def forward(self, x: Tensor) -> Tensor:
        y = conv_forward(x, self.spec)
        if self.bn is not None:
            y = batch_norm(y, self.bn)
        return relu(y) if self.act else y

    def set_mode(self, mode: str):
        if self.bn is not None:
            self.bn.mode = mode

    def fold(self) -> list["ConvBNAct"]:
        if self.bn is None:
            spec = ConvSpec(self.spec.kind, self.spec.in_channels, self.spec.out_channels,
                            self.spec.kernel, self.spec.stride, self.spec.padding, self.spec.groups,
                            Tensor(self.spec.weight.data.copy(), requires_grad=True),
                            Tensor(self.spec.bias.data.copy(), requires_grad=True))
            return [ConvBNAct(spec, None, self.act, self.name)]
        return [ConvBNAct(fold_ops.fold_bn_into_conv(self.spec, self.bn), None, self.act, self.name)]

    def named_state(self) -> list[tuple[str, StateRef]]:
        out = [(f"{self.name}.w", StateRef(self.spec.weight)), (f"{self.name}.b", StateRef(self.spec.bias))]
        if self.bn is not None:
            out += _bn_state(f"{self.name}.bn", self.bn)
        return out

    def plan(self, shape):
        n, c, h, w = shape
        out_hw = _conv_out_hw((h, w), self.spec.kernel, self.spec.stride, self.spec.padding)
        out_shape = (n, self.spec.out_channels, *out_hw)
        item = CostItem(self.name, _conv_macs(self.spec, out_hw, n),
                        n * c * h * w, int(np.prod(out_shape)))
        return out_shape, [item]


class IBELayer:
    """Backbone wrapper around one boundary-enhancement module."""

    def __init__(self, module: IBEModule, name: str):
        self.module = module
        self.name = name

    def forward(self, x: Tensor) -> Tensor:
        return ibe_forward(self.module, x)

    def set_mode(self, mode: str):
        set_ibe_mode(self.module, mode)

    def fold(self) -> list[ConvBNAct]:
        dw, pw, act = fold_ops.fold_ibe(self.module)
        return [ConvBNAct(dw, None, False, f"{self.name}.dw"),
                ConvBNAct(pw, None, act, f"{self.name}.pw")]

    def named_state(self) -> list[tuple[str, StateRef]]:
        m = self.module
        out = [
            (f"{self.name}.dw.w", StateRef(m.dw.weight)),
            (f"{self.name}.dw.b", StateRef(m.dw.bias)),
            (f"{self.name}.theta1", StateRef(m.theta1)),
            (f"{self.name}.theta2", StateRef(m.theta2)),
        ]
        out += _bn_state(f"{self.name}.bn1", m.bn1)
        out += _bn_state(f"{self.name}.bn2", m.bn2)
        out += [(f"{self.name}.pw.w", StateRef(m.pw.weight)), (f"{self.name}.pw.b", StateRef(m.pw.bias))]
        out += _bn_state(f"{self.name}.bn3", m.bn3)
        return out

    def plan(self, shape):
        n, c, h, w = shape
        m = self.module
        mid_hw = _conv_out_hw((h, w), (3, 3), m.dw.stride, 1)
        in_elems = n * c * h * w
        mid_elems = n * m.dw.out_channels * mid_hw[0] * mid_hw[1]
        out_elems = n * m.pw.out_channels * mid_hw[0] * mid_hw[1]
        items = [
            CostItem(f"{self.name}.dw", mid_elems * 9, in_elems, mid_elems),
            CostItem(f"{self.name}.descriptor", mid_elems * 1, in_elems, mid_elems),
            CostItem(f"{self.name}.projector", mid_elems * 9, in_elems, mid_elems),
            CostItem(f"{self.name}.branch_sum", 0, 2 * mid_elems, mid_elems),
            CostItem(f"{self.name}.pw", out_elems * m.dw.out_channels, mid_elems, out_elems),
        ]
        return (n, m.pw.out_channels, *mid_hw), items


class InvertedResidual:
    """Sequential sub-layers with an optional identity shortcut."""

    def __init__(self, layers: list, use_res: bool, name: str):
        self.layers = layers
        self.use_res = use_res
        self.name = name

    def forward(self, x: Tensor) -> Tensor:
        y = x
        for layer in self.layers:
            y = layer.forward(y)
        return add(x, y) if self.use_res else y

    def set_mode(self, mode: str):
        for layer in self.layers:
            layer.set_mode(mode)

    def fold(self) -> list["InvertedResidual"]:
        folded: list = []
        for layer in self.layers:
            folded.extend(layer.fold())
        return [InvertedResidual(folded, self.use_res, self.name)]

    def named_state(self):
        out = []
        for layer in self.layers:
            out.extend(layer.named_state())
        return out

    def plan(self, shape):
        items = []
        out = shape
        for layer in self.layers:
            out, sub = layer.plan(out)
            items.extend(sub)
        if self.use_res:
            elems = int(np.prod(out))
            items.append(CostItem(f"{self.name}.residual", 0, 2 * elems, elems))
        return out, items


class SharedNeck:
    """Channel-align, scale-align, sum, fuse with one DSC."""

    def __init__(self, aligns: list[ConvBNAct], fuse_dw: ConvBNAct, fuse_pw: ConvBNAct,
                 name: str = "neck"):
        self.aligns = aligns
        self.fuse_dw = fuse_dw
        self.fuse_pw = fuse_pw
        self.name = name

    def _upsample_factor(self, target_hw, hw):
        th, tw = target_hw
        h, w = hw
        if th % h or tw % w or th // h != tw // w:
            raise ShapeError(f"neck: non-integer scale ratio from {hw} to {target_hw}")
        return th // h

    def forward(self, features: Sequence[Tensor]) -> Tensor:
        if not features:
            raise ValueError("neck requires at least one feature map")
        aligned = [a.forward(f) for a, f in zip(self.aligns, features)]
        target_hw = max((t.shape[2], t.shape[3]) for t in aligned)
        scaled = []
        for t in aligned:
            f = self._upsample_factor(target_hw, (t.shape[2], t.shape[3]))
            scaled.append(upsample_nearest(t, f) if f > 1 else t)
        total = scaled[0]
        for t in scaled[1:]:
            total = add(total, t)
        return self.fuse_pw.forward(self.fuse_dw.forward(total))

    def set_mode(self, mode: str):
        for layer in (*self.aligns, self.fuse_dw, self.fuse_pw):
            layer.set_mode(mode)

    def fold(self) -> "SharedNeck":
        return SharedNeck([a.fold()[0] for a in self.aligns], self.fuse_dw.fold()[0],
                          self.fuse_pw.fold()[0], self.name)

    def named_state(self):
        out = []
        for layer in (*self.aligns, self.fuse_dw, self.fuse_pw):
            out.extend(layer.named_state())
        return out

    def plan(self, tap_shapes: list[tuple]):
        items = []
        aligned_shapes = []
        for a, shape in zip(self.aligns, tap_shapes):
            out, sub = a.plan(shape)
            items.extend(sub)
            aligned_shapes.append(out)
        target_hw = max((s[2], s[3]) for s in aligned_shapes)
        summed = (aligned_shapes[0][0], self.fuse_dw.spec.in_channels, *target_hw)
        full = int(np.prod(summed))
        for s in aligned_shapes:
            if (s[2], s[3]) != target_hw:
                items.append(CostItem(f"{self.name}.upsample", 0, int(np.prod(s)), full))
        items.append(CostItem(f"{self.name}.sum", 0, len(aligned_shapes) * full, full))
        out, sub = self.fuse_dw.plan(summed)
        items.extend(sub)
        out, sub = self.fuse_pw.plan(out)
        items.extend(sub)
        return out, items


@dataclass
class HeadMaps:
    """Raw per-cell logits: cls (N,C,H,W), obj (N,1,H,W), box (N,4,H,W)."""

    cls: Tensor
    obj: Tensor
    box: Tensor


class Head:
    """Decoupled head: one DSC branch for class logits, one for box+objectness."""

    def __init__(self, cls_branch: list[ConvBNAct], cls_pred: ConvBNAct,
                 reg_branch: list[ConvBNAct], box_pred: ConvBNAct, obj_pred: ConvBNAct,
                 name: str = "head"):
        self.cls_branch = cls_branch
        self.cls_pred = cls_pred
        self.reg_branch = reg_branch
        self.box_pred = box_pred
        self.obj_pred = obj_pred
        self.name = name

    def _layers(self):
        return (*self.cls_branch, self.cls_pred, *self.reg_branch, self.box_pred, self.obj_pred)

    def forward(self, x: Tensor) -> HeadMaps:
        c = x
        for layer in self.cls_branch:
            c = layer.forward(c)
        r = x
        for layer in self.reg_branch:
            r = layer.forward(r)
        return HeadMaps(cls=self.cls_pred.forward(c), obj=self.obj_pred.forward(r),
                        box=self.box_pred.forward(r))

    def set_mode(self, mode: str):
        for layer in self._layers():
            layer.set_mode(mode)

    def fold(self) -> "Head":
        return Head([l.fold()[0] for l in self.cls_branch], self.cls_pred.fold()[0],
                    [l.fold()[0] for l in self.reg_branch], self.box_pred.fold()[0],
                    self.obj_pred.fold()[0], self.name)

    def named_state(self):
        out = []
        for layer in self._layers():
            out.extend(layer.named_state())
        return out

    def plan(self, shape):
        items = []
        out = shape
        for layer in self.cls_branch:
            out, sub = layer.plan(out)
            items.extend(sub)
        _, sub = self.cls_pred.plan(out)
        items.extend(sub)
        out = shape
        for layer in self.reg_branch:
            out, sub = layer.plan(out)
            items.extend(sub)
        for pred in (self.box_pred, self.obj_pred):
            _, sub = pred.plan(out)
            items.extend(sub)
        return shape, items


# ---------------------------------------------------------------------------
# the network
# ---------------------------------------------------------------------------


def _dsc_pair(in_ch: int, out_ch: int, stride: int, rng, dtype, name: str) -> list[ConvBNAct]:
    dw = make_conv("depthwise", in_ch, in_ch, (3, 3), stride=stride, padding=1, rng=rng, dtype=dtype)
    pw = make_conv("pointwise", in_ch, out_ch, (1, 1), rng=rng, dtype=dtype)
    return [
        ConvBNAct(dw, make_batch_norm(in_ch, dtype=dtype), True, f"{name}.dw"),
        ConvBNAct(pw, make_batch_norm(out_ch, dtype=dtype), True, f"{name}.pw"),
    ]


class FemtoNet:
    """The assembled detector; ``stages`` mirrors the config's backbone rows."""

    def __init__(self, cfg: ModelConfig, seed: int = 0, dtype=np.float32):
        self.cfg = cfg
        self.dtype = dtype
        self.mode = "train"
        rng = np.random.default_rng(seed)
        self.stages: list[list] = []
        self.ibe_count = 0
        in_ch = 3
        for si, row in enumerate(cfg.backbone):
            stage: list = []
            if row.t is None:
                spec = make_conv("vanilla", in_ch, row.c, (3, 3), stride=row.s, padding=1,
                                 rng=rng, dtype=dtype)
                stage.append(ConvBNAct(spec, make_batch_norm(row.c, dtype=dtype), True,
                                       f"backbone.{si}.0.conv"))
                in_ch = row.c
            else:
                for bi in range(row.n):
                    stride = row.s if bi == 0 else 1
                    name = f"backbone.{si}.{bi}"
                    hidden = row.t * in_ch
                    layers: list = []
                    if row.t != 1:
                        expand = make_conv("pointwise", in_ch, hidden, (1, 1), rng=rng, dtype=dtype)
                        layers.append(ConvBNAct(expand, make_batch_norm(hidden, dtype=dtype), True,
                                                f"{name}.expand"))
                    if cfg.use_ibe:
                        layers.append(IBELayer(make_ibe(hidden, row.c, stride=stride, rng=rng,
                                                        dtype=dtype), f"ibe.{self.ibe_count}"))
                        self.ibe_count += 1
                    else:
                        layers.extend(_dsc_pair(hidden, row.c, stride, rng, dtype, name))
                    stage.append(InvertedResidual(layers, stride == 1 and in_ch == row.c, name))
                    in_ch = row.c
            self.stages.append(stage)

        tap_channels = [cfg.backbone[t].c for t in cfg.neck_taps]
        aligns = []
        for i, (tap, ch) in enumerate(zip(cfg.neck_taps, tap_channels)):
            spec = make_conv("pointwise", ch, cfg.neck_channels, (1, 1), rng=rng, dtype=dtype)
            aligns.append(ConvBNAct(spec, make_batch_norm(cfg.neck_channels, dtype=dtype), False,
                                    f"neck.align{i}"))
        fuse = _dsc_pair(cfg.neck_channels, cfg.neck_channels, 1, rng, dtype, "neck.fuse")
        self.neck = SharedNeck(aligns, fuse[0], fuse[1])

        w = cfg.head_width
        cls_branch = _dsc_pair(cfg.neck_channels, w, 1, rng, dtype, "head.cls")
        reg_branch = _dsc_pair(cfg.neck_channels, w, 1, rng, dtype, "head.reg")
        self.head = Head(
            cls_branch,
            ConvBNAct(make_conv("pointwise", w, cfg.num_classes, (1, 1), rng=rng, dtype=dtype),
                      None, False, "head.cls_pred"),
            reg_branch,
            ConvBNAct(make_conv("pointwise", w, 4, (1, 1), rng=rng, dtype=dtype),
                      None, False, "head.box_pred"),
            ConvBNAct(make_conv("pointwise", w, 1, (1, 1), rng=rng, dtype=dtype),
                      None, False, "head.obj_pred"),
        )

    # -- forward -------------------------------------------------------------
    def backbone_forward(self, x: Tensor) -> list[Tensor]:
        outs = []
        for stage in self.stages:
            for block in stage:
                x = block.forward(x)
            outs.append(x)
        return outs

    def forward(self, x: Tensor) -> HeadMaps:
        stage_outs = self.backbone_forward(x)
        taps = [stage_outs[t] for t in self.cfg.neck_taps]
        return self.head.forward(self.neck.forward(taps))

    def forward_flat(self, x: Tensor) -> Tensor:
        """All head maps concatenated along channels (probing / diffing)."""
        maps = self.forward(x)
        return concat_channels([maps.cls, maps.obj, maps.box])

    @property
    def out_stride(self) -> int:
        stride = 1
        for row in self.cfg.backbone[: min(self.cfg.neck_taps) + 1]:
            stride *= row.s
        return stride

    # -- bookkeeping ----------------------------------------------------------
    def set_mode(self, mode: str):
        if mode not in ("train", "eval"):
            raise ValueError(f"mode must be train or eval, got {mode}")
        self.mode = mode
        for stage in self.stages:
            for block in stage:
                block.set_mode(mode)
        self.neck.set_mode(mode)
        self.head.set_mode(mode)

    def named_state(self) -> list[tuple[str, StateRef]]:
        out = []
        for stage in self.stages:
            for block in stage:
                out.extend(block.named_state())
        out.extend(self.neck.named_state())
        out.extend(self.head.named_state())
        return out

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: ref.get().copy() for name, ref in self.named_state()}

    def load_state(self, state: dict[str, np.ndarray]):
        for name, ref in self.named_state():
            if name not in state:
                raise KeyError(f"missing state entry {name!r}")
            ref.set(state[name])

    def trainable_params(self) -> list[Tensor]:
        seen: dict[int, Tensor] = {}
        for _, ref in self.named_state():
            if ref.trainable and id(ref.tensor) not in seen:
                seen[id(ref.tensor)] = ref.tensor
        return list(seen.values())

    def plan(self, input_shape: tuple[int, int, int, int]):
        """Structural shape/cost walk; returns (stage shapes, head grid hw, items)."""
        items: list[CostItem] = []
        shape = input_shape
        stage_shapes = []
        for stage in self.stages:
            for block in stage:
                shape, sub = block.plan(shape)
                items.extend(sub)
            stage_shapes.append(shape)
        tap_shapes = [stage_shapes[t] for t in self.cfg.neck_taps]
        neck_out, sub = self.neck.plan(tap_shapes)
        items.extend(sub)
        _, sub = self.head.plan(neck_out)
        items.extend(sub)
        return stage_shapes, (neck_out[2], neck_out[3]), items

    def stage_shapes(self, input_hw: tuple[int, int] | None = None) -> list[tuple]:
        hw = input_hw or self.cfg.input_size
        shapes, _, _ = self.plan((1, 3, *hw))
        return shapes


def calibrate_stats(net: FemtoNet, rng: np.random.Generator, input_hw: tuple[int, int],
                    batches: int = 4, batch_size: int = 8):
    """Populate batch-norm running stats with a few train-mode forwards on
    standard-normal inputs (fold verification needs realistic eval stats)."""
    prev = net.mode
    net.set_mode("train")
    from .tensor import no_grad

    with no_grad():
        for _ in range(batches):
            x = Tensor(rng.standard_normal((batch_size, 3, *input_hw)).astype(net.dtype))
            net.forward(x)
    net.set_mode(prev)


def fold_model(net: FemtoNet) -> FemtoNet:
    """Replace every boundary-enhancement block by its folded DSC and fuse all
    standalone conv+BN pairs. Output-equivalent within the fold tolerance;
    idempotent (a model with nothing to fold is copied unchanged)."""
    if net.mode != "eval":
        raise ValueError("fold_model requires eval mode")
    folded = FemtoNet.__new__(FemtoNet)
    folded.cfg = net.cfg
    folded.dtype = net.dtype
    folded.mode = "eval"
    folded.ibe_count = net.ibe_count
    folded.stages = []
    for stage in net.stages:
        new_stage: list = []
        for block in stage:
            new_stage.extend(block.fold())
        folded.stages.append(new_stage)
    folded.neck = net.neck.fold()
    folded.head = net.head.fold()
    return folded


# ---------------------------------------------------------------------------
# detections
# ---------------------------------------------------------------------------


@dataclass
class Detection:
    box: tuple[float, float, float, float]
    score: float
    class_id: int


def box_iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU of (x1,y1,x2,y2) boxes: (len(a), len(b))."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    x1 = np.maximum(a[:, None, 0], b[None, :, 0])
    y1 = np.maximum(a[:, None, 1], b[None, :, 1])
    x2 = np.minimum(a[:, None, 2], b[None, :, 2])
    y2 = np.minimum(a[:, None, 3], b[None, :, 3])
    inter = np.clip(x2 - x1, 0, None) * np.clip(y2 - y1, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(union > 0, inter / union, 0.0)


def nms(boxes: np.ndarray, scores: np.ndarray, iou_thresh: float) -> list[int]:
    """Greedy NMS; score order, ties broken by lower index."""
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    if not order:
        return []
    iou = box_iou_matrix(boxes, boxes)
    kept: list[int] = []
    for i in order:
        if all(iou[i, j] <= iou_thresh for j in kept):
            kept.append(i)
    return kept


def decode_grid(box_map: np.ndarray, stride: int) -> np.ndarray:
    """Raw per-cell boxes (x1,y1,x2,y2), unclipped.

    Channels are (dx, dy, dw, dh): cell-relative center offsets and
    log-scaled sizes, cx=(j+dx)*stride, w=exp(dw)*stride.
    """
    _, h, w = box_map.shape
    jj, ii = np.meshgrid(np.arange(w), np.arange(h))
    cx = (jj + box_map[0]) * stride
    cy = (ii + box_map[1]) * stride
    bw = np.exp(box_map[2]) * stride
    bh = np.exp(box_map[3]) * stride
    return np.stack([cx - bw / 2, cy - bh / 2, cx + bw / 2, cy + bh / 2], axis=-1).reshape(-1, 4)


def decode_boxes(maps: HeadMaps, stride: int, score_thresh: float = 0.3, nms_iou: float = 0.5,
                 image_size: tuple[int, int] | None = None, index: int = 0) -> list[Detection]:
    """Score, threshold, class-wise NMS, clip to image bounds."""

    def _sig(z):
        return np.where(z >= 0, 1.0 / (1.0 + np.exp(-z)), np.exp(z) / (1.0 + np.exp(z)))

    cls = _sig(maps.cls.data[index].astype(np.float64))
    obj = _sig(maps.obj.data[index, 0].astype(np.float64))
    boxes = decode_grid(maps.box.data[index].astype(np.float64), stride)
    n_classes = cls.shape[0]
    scores = (obj[None] * cls).reshape(n_classes, -1)
    detections: list[Detection] = []
    for c in range(n_classes):
        idx = np.nonzero(scores[c] >= score_thresh)[0]
        if idx.size == 0:
            continue
        kept = nms(boxes[idx], scores[c][idx], nms_iou)
        for k in kept:
            x1, y1, x2, y2 = boxes[idx[k]]
            if image_size is not None:
                ih, iw = image_size
                x1, x2 = np.clip([x1, x2], 0, iw)
                y1, y2 = np.clip([y1, y2], 0, ih)
            if x2 > x1 and y2 > y1:
                detections.append(Detection((float(x1), float(y1), float(x2), float(y2)),
                                            float(scores[c][idx[k]]), c))
    detections.sort(key=lambda d: -d.score)
    return detections


# ---------------------------------------------------------------------------
# parameter accounting
# ---------------------------------------------------------------------------


@dataclass
class ParamReport:
    total: int
    by_group: dict[str, int]
    per_layer: list[tuple[str, int]] = field(default_factory=list)


def count_params(net: FemtoNet) -> ParamReport:
    """Exact trainable-scalar count, grouped backbone/neck/head."""
    by_group = {"backbone": 0, "neck": 0, "head": 0}
    per_layer: list[tuple[str, int]] = []
    for name, ref in net.named_state():
        if not ref.trainable:
            continue
        count = int(ref.get().size)
        per_layer.append((name, count))
        if name.startswith("neck."):
            by_group["neck"] += count
        elif name.startswith("head."):
            by_group["head"] += count
        else:
            by_group["backbone"] += count
    return ParamReport(sum(by_group.values()), by_group, per_layer)

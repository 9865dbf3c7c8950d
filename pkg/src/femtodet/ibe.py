"""Instance boundary enhancement block.

A depthwise-separable conv whose spatial stage is enriched with two branches
derived from the *same* 3x3 depthwise kernel (parameter reuse, nothing extra
is trained):

  * a 1x1 local descriptor whose per-channel weight is the kernel sum -- its
    sigmoid(theta1)-scaled output is subtracted from the depthwise output,
    leaving a difference response that highlights boundaries;
  * a sigmoid(theta2)-scaled copy of the kernel (semantic projector).

The two branch outputs pass through independent batch norms (they live in
different statistical ranges), are summed, and feed the pointwise conv. The
whole block is affine up to the final activation, so it folds back into a
plain depthwise + pointwise pair at inference (see fold.py).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import (
    BatchNormParams,
    ConvSpec,
    Tensor,
    batch_norm,
    conv_forward,
    make_batch_norm,
    make_conv,
    parameter,
    relu,
    sigmoid,
)


@dataclass
class IBEModule:
    """Parameter-reuse DSC block with dual normalization.

    theta1/theta2 are stored unconstrained; the logistic function maps them
    into (0, 1) wherever they scale a branch. Derived branch weights are
    always recomputed from the current depthwise kernel.
    """

    dw: ConvSpec
    theta1: Tensor
    theta2: Tensor
    bn1: BatchNormParams
    bn2: BatchNormParams
    pw: ConvSpec
    bn3: BatchNormParams
    activation: bool = True

    def __post_init__(self):
        if self.dw.kind != "depthwise" or self.dw.kernel != (3, 3):
            raise ValueError("IBE requires a depthwise 3x3 spatial conv")
        c = self.dw.out_channels
        if self.bn1.channels != c or self.bn2.channels != c:
            raise ValueError("bn1/bn2 channel counts must match the depthwise conv")
        if self.bn3.channels != self.pw.out_channels:
            raise ValueError("bn3 channel count must match the pointwise conv")

    @property
    def in_channels(self) -> int:
        return self.dw.in_channels

    @property
    def out_channels(self) -> int:
        return self.pw.out_channels

    def param_count(self) -> int:
        return (self.dw.param_count() + 2 + self.bn1.param_count() + self.bn2.param_count()
                + self.pw.param_count() + self.bn3.param_count())


def make_ibe(in_channels: int, out_channels: int, stride: int = 1,
             rng: np.random.Generator | None = None, dtype=np.float32,
             activation: bool = True) -> IBEModule:
    """Fresh module; thetas start at 0 so both branch scales start at 0.5."""
    dw = make_conv("depthwise", in_channels, in_channels, (3, 3), stride=stride, padding=1,
                   rng=rng, dtype=dtype)
    pw = make_conv("pointwise", in_channels, out_channels, (1, 1), rng=rng, dtype=dtype)
    return IBEModule(
        dw=dw,
        theta1=parameter(np.zeros(1, dtype=dtype)),
        theta2=parameter(np.zeros(1, dtype=dtype)),
        bn1=make_batch_norm(in_channels, dtype=dtype),
        bn2=make_batch_norm(in_channels, dtype=dtype),
        pw=pw,
        bn3=make_batch_norm(out_channels, dtype=dtype),
        activation=activation,
    )


def derive_descriptor(dw: ConvSpec) -> ConvSpec:
    """1x1 depthwise conv whose per-channel weight is the 3x3 kernel sum.

    Unsigned: the subtraction and the sigmoid(theta1) scale are applied by
    the caller. Bias 0 (any mean shift is bn1's job). The weight is a graph
    expression of the shared kernel, so gradients reach it from this branch.
    """
    if dw.kind != "depthwise" or dw.kernel != (3, 3):
        raise ValueError("descriptor derives from a depthwise 3x3 conv only")
    c = dw.out_channels
    weight = dw.weight.sum(axis=(2, 3), keepdims=True)
    zero_bias = Tensor(np.zeros(c, dtype=dw.weight.data.dtype))
    return ConvSpec("depthwise", c, c, (1, 1), dw.stride, 0, c, weight, zero_bias)


def derive_projector(dw: ConvSpec, theta2: Tensor) -> ConvSpec:
    """sigmoid(theta2)-scaled copy of the depthwise conv (weights and bias)."""
    if dw.kind != "depthwise" or dw.kernel != (3, 3):
        raise ValueError("projector derives from a depthwise 3x3 conv only")
    s = sigmoid(theta2)
    return ConvSpec("depthwise", dw.in_channels, dw.out_channels, dw.kernel, dw.stride,
                    dw.padding, dw.groups, s * dw.weight, s * dw.bias)


def ibe_forward(m: IBEModule, x_in: Tensor) -> Tensor:
    x21 = conv_forward(x_in, m.dw)
    x22 = conv_forward(x_in, derive_descriptor(m.dw))
    x31 = x21 - sigmoid(m.theta1) * x22
    x23 = conv_forward(x_in, derive_projector(m.dw, m.theta2))
    y = batch_norm(x31, m.bn1) + batch_norm(x23, m.bn2)
    y = conv_forward(y, m.pw)
    y = batch_norm(y, m.bn3)
    return relu(y) if m.activation else y


def ibe_branches(m: IBEModule, x_in: Tensor) -> tuple[Tensor, Tensor, Tensor, Tensor]:
    """Intermediate branch outputs (x21, x22, x31, x23) for inspection/tests."""
    x21 = conv_forward(x_in, m.dw)
    x22 = conv_forward(x_in, derive_descriptor(m.dw))
    x31 = x21 - sigmoid(m.theta1) * x22
    x23 = conv_forward(x_in, derive_projector(m.dw, m.theta2))
    return x21, x22, x31, x23


def set_ibe_mode(m: IBEModule, mode: str):
    m.bn1.mode = mode
    m.bn2.mode = mode
    m.bn3.mode = mode

"""Exact folding of batch norm and parallel affine convs into plain convs.

Everything between a boundary-enhancement block's input and its pointwise
output is affine, so the whole block collapses to one depthwise 3x3 plus one
pointwise conv:

  1. norm-into-conv:      w' = gamma * w / sqrt(var + eps)   (per out channel)
                          b' = beta + gamma * (b - mean) / sqrt(var + eps)
  2. homogeneity:         s * conv(w, b)  ==  conv(s*w, s*b)
  3. additivity:          conv(w1, b1) + conv(w2, b2) == conv(w1+w2, b1+b2)
     (same geometry; the 1x1 descriptor is first embedded at the center of a
      3x3 kernel with matching padding so geometries coincide)

The arithmetic runs in float64 and is cast back to the conv's dtype, so the
folded forward tracks the unfolded one to ~1e-15 in 64-bit mode.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .ibe import IBEModule, derive_descriptor, ibe_forward
from .tensor import BatchNormParams, ConvSpec, Tensor


@dataclass
class FoldReport:
    """Forward-equivalence evidence for one fold."""

    max_abs_diff: float
    max_rel_diff: float
    n_probes: int
    param_count_before: int
    param_count_after: int

    def as_text(self) -> str:
        return "\n".join(
            f"{k}={v}"
            for k, v in (
                ("max_abs_diff", repr(self.max_abs_diff)),
                ("max_rel_diff", repr(self.max_rel_diff)),
                ("n_probes", self.n_probes),
                ("param_count_before", self.param_count_before),
                ("param_count_after", self.param_count_after),
            )
        )


def _f64(t: Tensor) -> np.ndarray:
    return t.data.astype(np.float64)


def _spec_like(conv: ConvSpec, weight: np.ndarray, bias: np.ndarray, *, kind: str | None = None,
               kernel: tuple[int, int] | None = None, padding: int | None = None) -> ConvSpec:
    dtype = conv.weight.data.dtype
    return ConvSpec(
        kind if kind is not None else conv.kind,
        conv.in_channels, conv.out_channels,
        kernel if kernel is not None else conv.kernel,
        conv.stride,
        padding if padding is not None else conv.padding,
        conv.groups,
        Tensor(weight.astype(dtype), requires_grad=True),
        Tensor(bias.astype(dtype), requires_grad=True),
    )


def fold_bn_into_conv(conv: ConvSpec, bn: BatchNormParams) -> ConvSpec:
    """Fuse an eval-mode batch norm into the conv that feeds it."""
    if bn.mode != "eval":
        raise ValueError("fold requires eval-mode batch norm (train-mode stats are per batch)")
    if bn.channels != conv.out_channels:
        raise ValueError(
            f"fold: bn has {bn.channels} channels, conv produces {conv.out_channels}"
        )
    gamma = _f64(bn.gamma)
    beta = _f64(bn.beta)
    mean = bn.running_mean.astype(np.float64)
    var = bn.running_var.astype(np.float64)
    scale = gamma / np.sqrt(var + bn.eps)
    w = _f64(conv.weight) * scale.reshape(-1, 1, 1, 1)
    b = beta + scale * (_f64(conv.bias) - mean)
    return _spec_like(conv, w, b)


def scale_affine(conv: ConvSpec, s: float) -> ConvSpec:
    """s * conv(x) as a conv: weights and bias both scaled."""
    if not np.isfinite(s):
        raise ValueError(f"scale must be finite, got {s}")
    return _spec_like(conv, _f64(conv.weight) * s, _f64(conv.bias) * s)


def embed_kernel(conv: ConvSpec, target: tuple[int, int]) -> ConvSpec:
    """Embed a 1x1 kernel at the center of an odd target kernel.

    Padding is adjusted to (target-1)//2 so the embedded conv sees the same
    receptive-field centers; the forward map is unchanged on all inputs.
    """
    kh, kw = target
    if kh % 2 == 0 or kw % 2 == 0 or kh < 1 or kw < 1:
        raise ValueError(f"target kernel dims must be odd and >= 1, got {target}")
    if conv.kernel == (kh, kw):
        return _spec_like(conv, _f64(conv.weight), _f64(conv.bias))
    if conv.kernel != (1, 1):
        raise ValueError(f"embedding is defined for 1x1 kernels, got {conv.kernel}")
    w = np.zeros((conv.out_channels, conv.in_channels // conv.groups, kh, kw))
    w[:, :, kh // 2, kw // 2] = _f64(conv.weight)[:, :, 0, 0]
    kind = "depthwise" if conv.kind == "depthwise" else "vanilla"
    return _spec_like(conv, w, _f64(conv.bias), kind=kind, kernel=(kh, kw), padding=kh // 2)


def add_affine(a: ConvSpec, b: ConvSpec) -> ConvSpec:
    """conv(x; a) + conv(x; b) as one conv; geometries must match exactly."""
    geom_a = (a.kind, a.kernel, a.stride, a.padding, a.groups, a.in_channels, a.out_channels)
    geom_b = (b.kind, b.kernel, b.stride, b.padding, b.groups, b.in_channels, b.out_channels)
    if geom_a != geom_b:
        raise ValueError(f"add_affine: geometry mismatch {geom_a} vs {geom_b}")
    return _spec_like(a, _f64(a.weight) + _f64(b.weight), _f64(a.bias) + _f64(b.bias))


def _sigmoid64(theta: Tensor) -> float:
    t = float(theta.data.reshape(-1)[0])
    return 1.0 / (1.0 + np.exp(-t)) if t >= 0 else np.exp(t) / (1.0 + np.exp(t))


def fold_ibe(m: IBEModule) -> tuple[ConvSpec, ConvSpec, bool]:
    """Collapse a boundary-enhancement block to (depthwise 3x3, pointwise).

    difference branch:  dw - sigmoid(theta1) * embed(descriptor), then bn1
    projector branch:   sigmoid(theta2) * dw, then bn2
    the two fold into one depthwise 3x3 by additivity; bn3 folds into the
    pointwise. The activation (if any) survives unchanged.
    """
    for bn in (m.bn1, m.bn2, m.bn3):
        if bn.mode != "eval":
            raise ValueError("fold requires all batch norms in eval mode")
    descriptor = embed_kernel(derive_descriptor(m.dw), (3, 3))
    diff = add_affine(m.dw, scale_affine(descriptor, -_sigmoid64(m.theta1)))
    projector = scale_affine(m.dw, _sigmoid64(m.theta2))
    dw_folded = add_affine(fold_bn_into_conv(diff, m.bn1), fold_bn_into_conv(projector, m.bn2))
    pw_folded = fold_bn_into_conv(m.pw, m.bn3)
    return dw_folded, pw_folded, m.activation


def fold_probe_sizes(channels: int) -> tuple[tuple[int, int, int, int], ...]:
    return ((1, channels, 8, 8), (2, channels, 16, 16))


def verify_fold(forward_before, forward_after, in_channels: int, *, n_probes: int = 100,
                seed: int = 0, dtype=np.float32, sizes=None,
                param_count_before: int = 0, param_count_after: int = 0) -> FoldReport:
    """Probe two forwards with fixed-seed standard-normal inputs.

    Probe sizes alternate between 1xCx8x8 and 2xCx16x16 (reproducible CI)
    unless explicit sizes are given.
    """
    rng = np.random.default_rng(seed)
    if sizes is None:
        sizes = fold_probe_sizes(in_channels)
    max_abs = 0.0
    max_rel = 0.0
    from .tensor import no_grad

    with no_grad():
        for i in range(n_probes):
            x = Tensor(rng.standard_normal(sizes[i % len(sizes)]).astype(dtype))
            a = forward_before(x).data
            b = forward_after(x).data
            diff = np.abs(a - b)
            max_abs = max(max_abs, float(diff.max()))
            denom = np.maximum(np.abs(a), 1e-12)
            max_rel = max(max_rel, float((diff / denom).max()))
    return FoldReport(max_abs, max_rel, n_probes, param_count_before, param_count_after)


def verify_ibe_fold(m: IBEModule, *, n_probes: int = 100, seed: int = 0) -> FoldReport:
    dw, pw, act = fold_ibe(m)
    from .model import ConvBNAct  # layer wrapper shared with the network

    folded = [ConvBNAct(dw, None, False), ConvBNAct(pw, None, act)]

    def after(x):
        for layer in folded:
            x = layer.forward(x)
        return x

    after_count = dw.param_count() + pw.param_count()
    return verify_fold(lambda x: ibe_forward(m, x), after, m.in_channels,
                       n_probes=n_probes, seed=seed, dtype=m.dw.weight.data.dtype,
                       param_count_before=m.param_count(), param_count_after=after_count)

"""NCHW tensor core: forward ops and reverse-mode gradients.

float32 is the production dtype. float64 is a construction-time switch used by
verification paths (gradient checks, fold equivalence probes); nothing here
mixes the two silently.

The op set is exactly what the detector needs: conv2d (vanilla / depthwise /
pointwise via groups), batch norm (train and eval), relu, nearest upsampling,
elementwise arithmetic, a few pointwise nonlinearities, and reductions. ReLU
uses the subgradient 0 at x == 0.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DEFAULT_DTYPE = np.float32


class ShapeError(ValueError):
    """Operand shapes are incompatible; the message names the offending axis."""


_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block (inference / probing)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """A numpy-backed node in the autodiff graph.

    Leaves created with ``requires_grad=True`` are trainable parameters. Every
    op records a backward closure, so ``backward()`` on a scalar loss
    accumulates ``.grad`` on all reachable parameters. Replaying a forward
    with identical inputs is bit-identical (all ops are pure numpy).
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        if isinstance(data, np.ndarray):
            self.data = data
        else:
            arr = np.asarray(data)
            self.data = arr if arr.dtype in (np.float32, np.float64) else arr.astype(DEFAULT_DTYPE)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward = None

    # -- introspection ------------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # -- autodiff -----------------------------------------------------------
    def backward(self):
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar loss")
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def zero_grad(self):
        self.grad = None

    # -- operator sugar ------------------------------------------------------
    def __add__(self, other):
        return _ewise_add(self, _coerce(other, self))

    def __radd__(self, other):
        return _ewise_add(_coerce(other, self), self)

    def __sub__(self, other):
        return _ewise_sub(self, _coerce(other, self))

    def __rsub__(self, other):
        return _ewise_sub(_coerce(other, self), self)

    def __mul__(self, other):
        return _ewise_mul(self, _coerce(other, self))

    def __rmul__(self, other):
        return _ewise_mul(_coerce(other, self), self)

    def __truediv__(self, other):
        return _ewise_div(self, _coerce(other, self))

    def __rtruediv__(self, other):
        return _ewise_div(_coerce(other, self), self)

    def __neg__(self):
        return _ewise_mul(self, _coerce(-1.0, self))

    def sum(self, axis=None, keepdims=False):
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tensor_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) != 1 or not isinstance(shape[0], (tuple, list)) else shape[0])


def tensor(data, dtype=None, requires_grad: bool = False) -> Tensor:
    """Construction boundary: validates finiteness, fixes the dtype."""
    if dtype is None:
        dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64) else DEFAULT_DTYPE
    arr = np.asarray(data, dtype=dtype)
    if not np.all(np.isfinite(arr)):
        raise ValueError("tensor data must be finite (NaN/Inf rejected)")
    return Tensor(arr, requires_grad=requires_grad)


def parameter(data, dtype=None) -> Tensor:
    return tensor(data, dtype=dtype, requires_grad=True)


def zero_grads(params: Iterable[Tensor]):
    for p in params:
        p.grad = None


def _coerce(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=like.dtype))


def _needs_graph(parents: Sequence[Tensor]) -> bool:
    return _grad_enabled and any(p.requires_grad or p._parents for p in parents)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable | None) -> Tensor:
    out = Tensor(data)
    if backward is not None and _needs_graph(parents):
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _accum(t: Tensor, g: np.ndarray):
    # closures never mutate a grad array after handing it over, so no copy
    t.grad = g if t.grad is None else t.grad + g


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise ops
# ---------------------------------------------------------------------------

def _ewise_add(a: Tensor, b: Tensor) -> Tensor:
    data = a.data + b.data

    def backward(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))

    return _make(data, (a, b), backward)


def _ewise_sub(a: Tensor, b: Tensor) -> Tensor:
    data = a.data - b.data

    def backward(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(-g, b.data.shape))

    return _make(data, (a, b), backward)


def _ewise_mul(a: Tensor, b: Tensor) -> Tensor:
    data = a.data * b.data

    def backward(g):
        _accum(a, _unbroadcast(g * b.data, a.data.shape))
        _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return _make(data, (a, b), backward)


def _ewise_div(a: Tensor, b: Tensor) -> Tensor:
    data = a.data / b.data

    def backward(g):
        _accum(a, _unbroadcast(g / b.data, a.data.shape))
        _accum(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _make(data, (a, b), backward)


def add(x: Tensor, y: Tensor) -> Tensor:
    """Strict elementwise sum; shapes must be identical."""
    if x.data.shape != y.data.shape:
        raise ShapeError(f"add: shape mismatch {x.data.shape} vs {y.data.shape}")
    return _ewise_add(x, y)


def relu(x: Tensor) -> Tensor:
    data = np.maximum(x.data, 0)

    def backward(g):
        _accum(x, g * (x.data > 0))

    return _make(data, (x,), backward)


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    data = np.where(d >= 0, 1.0 / (1.0 + np.exp(-d)), np.exp(d) / (1.0 + np.exp(d))).astype(d.dtype)

    def backward(g):
        _accum(x, g * data * (1.0 - data))

    return _make(data, (x,), backward)


def exp(x: Tensor) -> Tensor:
    data = np.exp(x.data)

    def backward(g):
        _accum(x, g * data)

    return _make(data, (x,), backward)


def log(x: Tensor) -> Tensor:
    data = np.log(x.data)

    def backward(g):
        _accum(x, g / x.data)

    return _make(data, (x,), backward)


def maximum(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise max; ties route the gradient to the first operand."""
    data = np.maximum(a.data, b.data)

    def backward(g):
        mask = a.data >= b.data
        _accum(a, _unbroadcast(g * mask, a.data.shape))
        _accum(b, _unbroadcast(g * ~mask, b.data.shape))

    return _make(data, (a, b), backward)


def minimum(a: Tensor, b: Tensor) -> Tensor:
    data = np.minimum(a.data, b.data)

    def backward(g):
        mask = a.data <= b.data
        _accum(a, _unbroadcast(g * mask, a.data.shape))
        _accum(b, _unbroadcast(g * ~mask, b.data.shape))

    return _make(data, (a, b), backward)


def tensor_sum(x: Tensor, axis=None, keepdims=False) -> Tensor:
    data = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        g = np.asarray(g)
        if axis is None:
            _accum(x, np.broadcast_to(g, x.data.shape).astype(x.dtype, copy=True))
            return
        if not keepdims:
            axes = axis if isinstance(axis, tuple) else (axis,)
            for ax in sorted(a % x.data.ndim for a in axes):
                g = np.expand_dims(g, ax)
        _accum(x, np.broadcast_to(g, x.data.shape).astype(x.dtype, copy=True))

    return _make(data, (x,), backward)


def tensor_mean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    if axis is None:
        count = x.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([x.data.shape[a] for a in axes]))
    s = tensor_sum(x, axis=axis, keepdims=keepdims)
    return s * (1.0 / count)


def reshape(x: Tensor, shape) -> Tensor:
    data = x.data.reshape(shape)

    def backward(g):
        _accum(x, g.reshape(x.data.shape))

    return _make(data, (x,), backward)


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    """View of channels [start, stop) of an NCHW tensor."""
    data = x.data[:, start:stop]

    def backward(g):
        full = np.zeros_like(x.data)
        full[:, start:stop] = g
        _accum(x, full)

    return _make(data, (x,), backward)


def concat_channels(tensors: Sequence[Tensor]) -> Tensor:
    """Concatenate NCHW tensors along the channel axis."""
    data = np.concatenate([t.data for t in tensors], axis=1)
    splits = np.cumsum([t.data.shape[1] for t in tensors])[:-1]

    def backward(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=1)):
            _accum(t, piece)

    return _make(data, tuple(tensors), backward)


def bce_with_logits(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Elementwise binary cross entropy on raw logits (numerically stable).

    Targets are constants, not graph nodes; the gradient is the exact
    closed form sigmoid(z) - t.
    """
    z = logits.data
    t = np.asarray(targets, dtype=z.dtype)
    data = np.maximum(z, 0) - z * t + np.log1p(np.exp(-np.abs(z)))

    def backward(g):
        sig = np.where(z >= 0, 1.0 / (1.0 + np.exp(-z)), np.exp(z) / (1.0 + np.exp(z)))
        _accum(logits, g * (sig - t))

    return _make(data, (logits,), backward)


# ---------------------------------------------------------------------------
# conv2d
# ---------------------------------------------------------------------------

def _out_hw(h: int, w: int, kh: int, kw: int, stride: int, padding: int) -> tuple[int, int]:
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    return ho, wo


def _pad_nchw(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    n, c, h, w = x.shape
    out = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=x.dtype)
    out[:, :, p : p + h, p : p + w] = x
    return out


def _windows(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return win[:, :, ::stride, ::stride][:, :, :ho, :wo]


def _shifted(xp, i, j, stride, ho, wo):
    return xp[:, :, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride]


def _conv_forward_raw(x, w, b, stride, padding, groups):
    n, cin, h, wd = x.shape
    cout, cpg, kh, kw = w.shape
    ho, wo = _out_hw(h, wd, kh, kw, stride, padding)
    if kh == 1 and kw == 1 and groups == 1 and padding == 0:
        xs = x[:, :, ::stride, ::stride]
        xs = xs.reshape(n, cin, ho * wo)
        out = np.matmul(w[:, :, 0, 0], xs).reshape(n, cout, ho, wo)
    elif groups == cin and cpg == 1 and cout == cin:
        xp = _pad_nchw(x, padding)
        out = np.zeros((n, cin, ho, wo), dtype=x.dtype)
        for i in range(kh):
            for j in range(kw):
                out += _shifted(xp, i, j, stride, ho, wo) * w[:, 0, i, j].reshape(1, -1, 1, 1)
    elif groups == 1:
        xp = _pad_nchw(x, padding)
        win = _windows(xp, kh, kw, stride, ho, wo)
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, cin * kh * kw)
        out = (cols @ w.reshape(cout, -1).T).reshape(n, ho, wo, cout).transpose(0, 3, 1, 2)
    else:
        xp = _pad_nchw(x, padding)
        win = _windows(xp, kh, kw, stride, ho, wo).reshape(n, groups, cpg, ho, wo, kh, kw)
        cols = win.transpose(1, 0, 3, 4, 2, 5, 6).reshape(groups, n * ho * wo, cpg * kh * kw)
        wg = w.reshape(groups, cout // groups, cpg * kh * kw)
        out = np.matmul(cols, wg.transpose(0, 2, 1))  # (g, n*ho*wo, og)
        out = out.reshape(groups, n, ho, wo, cout // groups).transpose(1, 0, 4, 2, 3)
        out = out.reshape(n, cout, ho, wo)
    if not out.flags.c_contiguous or not out.flags.writeable:
        out = np.ascontiguousarray(out)
    if b is not None:
        out += b.reshape(1, -1, 1, 1)
    return out


def _conv_backward_raw(g, x, w, stride, padding, groups):
    n, cin, h, wd = x.shape
    cout, cpg, kh, kw = w.shape
    ho, wo = g.shape[2], g.shape[3]
    if kh == 1 and kw == 1 and groups == 1 and padding == 0 and stride == 1:
        dw = np.tensordot(g, x, axes=([0, 2, 3], [0, 2, 3]))[:, :, None, None]
        dx = np.matmul(w[:, :, 0, 0].T, g.reshape(n, cout, ho * wo)).reshape(n, cin, h, wd)
        return dx, dw
    xp = _pad_nchw(x, padding)
    dxp = np.zeros_like(xp)
    if groups == cin and cpg == 1 and cout == cin:
        dw = np.empty_like(w)
        tmp = np.empty_like(g)
        for i in range(kh):
            for j in range(kw):
                view = _shifted(xp, i, j, stride, ho, wo)
                dw[:, 0, i, j] = np.einsum("nchw,nchw->c", view, g)
                np.multiply(g, w[:, 0, i, j].reshape(1, -1, 1, 1), out=tmp)
                _shifted(dxp, i, j, stride, ho, wo)[...] += tmp
    elif groups == 1:
        win = _windows(xp, kh, kw, stride, ho, wo)
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, cin * kh * kw)
        gmat = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, cout)
        dw = (gmat.T @ cols).reshape(cout, cin, kh, kw)
        dcols = (gmat @ w.reshape(cout, -1)).reshape(n, ho, wo, cin, kh, kw)
        for i in range(kh):
            for j in range(kw):
                _shifted(dxp, i, j, stride, ho, wo)[...] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    else:
        win = _windows(xp, kh, kw, stride, ho, wo).reshape(n, groups, cpg, ho, wo, kh, kw)
        cols = win.transpose(1, 0, 3, 4, 2, 5, 6).reshape(groups, n * ho * wo, cpg * kh * kw)
        gmat = g.reshape(n, groups, cout // groups, ho, wo)
        gmat = gmat.transpose(1, 0, 3, 4, 2).reshape(groups, n * ho * wo, cout // groups)
        dw = np.matmul(gmat.transpose(0, 2, 1), cols).reshape(cout, cpg, kh, kw)
        dcols = np.matmul(gmat, w.reshape(groups, cout // groups, cpg * kh * kw))
        dcols = dcols.reshape(groups, n, ho, wo, cpg, kh, kw).transpose(1, 0, 4, 2, 3, 5, 6)
        dcols = dcols.reshape(n, cin, ho, wo, kh, kw)
        for i in range(kh):
            for j in range(kw):
                _shifted(dxp, i, j, stride, ho, wo)[...] += dcols[:, :, :, :, i, j]
    dx = dxp[:, :, padding : padding + h, padding : padding + wd] if padding else dxp
    return dx, dw


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, *, stride: int = 1,
           padding: int = 0, groups: int = 1) -> Tensor:
    """2D cross-correlation (no kernel flip) with zero padding and bias.

    weight is (out, in/groups, kh, kw); differentiable in x, weight and bias.
    """
    if x.ndim != 4:
        raise ShapeError(f"conv2d: input axis count must be 4 (NCHW), got {x.ndim}")
    n, cin, h, w = x.shape
    cout, cpg, kh, kw = weight.shape
    if cin != cpg * groups:
        raise ShapeError(
            f"conv2d: channel axis mismatch: input has {cin} channels, weight expects {cpg * groups}"
        )
    if cout % groups:
        raise ShapeError(f"conv2d: output channel axis {cout} not divisible by groups {groups}")
    if h + 2 * padding < kh:
        raise ShapeError(f"conv2d: height axis too small: {h}+2*{padding} < kernel {kh}")
    if w + 2 * padding < kw:
        raise ShapeError(f"conv2d: width axis too small: {w}+2*{padding} < kernel {kw}")
    if bias is not None and bias.data.shape != (cout,):
        raise ShapeError(f"conv2d: bias axis must be ({cout},), got {bias.data.shape}")

    data = _conv_forward_raw(x.data, weight.data, None if bias is None else bias.data,
                             stride, padding, groups)
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        dx, dw = _conv_backward_raw(g, x.data, weight.data, stride, padding, groups)
        _accum(x, dx)
        _accum(weight, dw)
        if bias is not None:
            _accum(bias, g.sum(axis=(0, 2, 3)))

    return _make(data, parents, backward)


def upsample_nearest(x: Tensor, factor: int) -> Tensor:
    """Block-replicate each pixel factor x factor."""
    if factor < 1 or int(factor) != factor:
        raise ValueError(f"upsample factor must be a positive integer, got {factor}")
    factor = int(factor)
    data = x.data.repeat(factor, axis=2).repeat(factor, axis=3)

    def backward(g):
        n, c, h, w = x.data.shape
        _accum(x, g.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5)))

    return _make(data, (x,), backward)


# ---------------------------------------------------------------------------
# conv / bn parameter containers
# ---------------------------------------------------------------------------

CONV_KINDS = ("vanilla", "depthwise", "pointwise")


@dataclass
class ConvSpec:
    """A convolution's full affine description: weights + bias + geometry.

    This is the unit the folding algebra operates on; weight/bias may be
    graph tensors (the boundary-enhancement branches derive theirs from the
    shared depthwise kernel).
    """

    kind: str
    in_channels: int
    out_channels: int
    kernel: tuple[int, int]
    stride: int
    padding: int
    groups: int
    weight: Tensor
    bias: Tensor

    def __post_init__(self):
        if self.kind not in CONV_KINDS:
            raise ValueError(f"unknown conv kind {self.kind!r}")
        if self.in_channels % self.groups:
            raise ValueError(f"in_channels {self.in_channels} not divisible by groups {self.groups}")
        if self.kind == "depthwise":
            if not (self.groups == self.in_channels == self.out_channels):
                raise ValueError("depthwise requires groups == in_channels == out_channels")
            expect = (self.out_channels, 1, *self.kernel)
            if self.weight.shape != expect:
                raise ShapeError(f"depthwise weight axis mismatch: {self.weight.shape} != {expect}")
        if self.kind == "pointwise":
            if self.kernel != (1, 1):
                raise ValueError("pointwise requires a (1, 1) kernel")
            if self.groups != 1:
                raise ValueError("pointwise requires groups == 1")
        expect = (self.out_channels, self.in_channels // self.groups, *self.kernel)
        if self.weight.shape != expect:
            raise ShapeError(f"conv weight axis mismatch: {self.weight.shape} != {expect}")
        if self.bias.shape != (self.out_channels,):
            raise ShapeError(f"conv bias axis mismatch: {self.bias.shape} != {(self.out_channels,)}")

    @property
    def dtype(self):
        return self.weight.dtype

    def param_count(self) -> int:
        return self.weight.size + self.bias.size


def conv_forward(x: Tensor, spec: ConvSpec) -> Tensor:
    if x.shape[1] != spec.in_channels:
        raise ShapeError(
            f"conv: channel axis mismatch: input has {x.shape[1]} channels, spec expects {spec.in_channels}"
        )
    return conv2d(x, spec.weight, spec.bias, stride=spec.stride, padding=spec.padding, groups=spec.groups)


def make_conv(kind: str, in_channels: int, out_channels: int, kernel: tuple[int, int],
              stride: int = 1, padding: int = 0, rng: np.random.Generator | None = None,
              dtype=DEFAULT_DTYPE) -> ConvSpec:
    """He-normal initialised conv of the given kind; bias zero."""
    groups = in_channels if kind == "depthwise" else 1
    kh, kw = kernel
    fan_in = (in_channels // groups) * kh * kw
    shape = (out_channels, in_channels // groups, kh, kw)
    if rng is None:
        w = np.zeros(shape, dtype=dtype)
    else:
        w = (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)
    return ConvSpec(kind, in_channels, out_channels, kernel, stride, padding, groups,
                    parameter(w, dtype=dtype), parameter(np.zeros(out_channels, dtype=dtype), dtype=dtype))


@dataclass
class BatchNormParams:
    """Per-channel affine normalization state.

    Biased (population) variance everywhere: train-mode normalization and the
    running_var it accumulates use the same convention, which keeps the fold
    algebra exact.
    """

    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = 1e-5
    momentum: float = 0.1
    mode: str = "train"

    def __post_init__(self):
        if self.eps <= 0:
            raise ValueError(f"eps must be positive, got {self.eps}")
        if not 0 < self.momentum < 1:
            raise ValueError(f"momentum must be in (0,1), got {self.momentum}")
        c = self.gamma.shape[0]
        for name, v in (("beta", self.beta.shape), ("running_mean", self.running_mean.shape),
                        ("running_var", self.running_var.shape)):
            if v != (c,):
                raise ShapeError(f"batch_norm: {name} axis must be ({c},), got {v}")
        if np.any(self.running_var < 0):
            raise ValueError("running_var must be non-negative")

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]

    def param_count(self) -> int:
        return self.gamma.size + self.beta.size


def make_batch_norm(channels: int, eps: float = 1e-5, momentum: float = 0.1,
                    dtype=DEFAULT_DTYPE) -> BatchNormParams:
    return BatchNormParams(
        gamma=parameter(np.ones(channels, dtype=dtype)),
        beta=parameter(np.zeros(channels, dtype=dtype)),
        running_mean=np.zeros(channels, dtype=dtype),
        running_var=np.ones(channels, dtype=dtype),
        eps=eps, momentum=momentum,
    )


def batch_norm(x: Tensor, bn: BatchNormParams) -> Tensor:
    """Per-channel normalization over (N, H, W).

    Train mode normalizes with batch statistics (biased variance) and updates
    the running stats with momentum; eval mode uses the running stats.
    """
    if x.shape[1] != bn.channels:
        raise ShapeError(
            f"batch_norm: channel axis mismatch: input has {x.shape[1]} channels, params have {bn.channels}"
        )
    gamma, beta = bn.gamma, bn.beta
    d = x.data
    if bn.mode == "train":
        m = d.mean(axis=(0, 2, 3))
        centered = d - m.reshape(1, -1, 1, 1)
        v = np.einsum("nchw,nchw->c", centered, centered) / (d.shape[0] * d.shape[2] * d.shape[3])
        bn.running_mean = ((1.0 - bn.momentum) * bn.running_mean + bn.momentum * m).astype(d.dtype)
        bn.running_var = ((1.0 - bn.momentum) * bn.running_var + bn.momentum * v).astype(d.dtype)
        inv = 1.0 / np.sqrt(v + np.asarray(bn.eps, dtype=d.dtype))
        xhat = centered * inv.reshape(1, -1, 1, 1)
    else:
        m = bn.running_mean.astype(d.dtype)
        v = bn.running_var.astype(d.dtype)
        inv = 1.0 / np.sqrt(v + np.asarray(bn.eps, dtype=d.dtype))
        xhat = (d - m.reshape(1, -1, 1, 1)) * inv.reshape(1, -1, 1, 1)
    data = gamma.data.reshape(1, -1, 1, 1) * xhat + beta.data.reshape(1, -1, 1, 1)

    train_mode = bn.mode == "train"

    def backward(g):
        count = g.shape[0] * g.shape[2] * g.shape[3]
        sum_g = g.sum(axis=(0, 2, 3))
        sum_g_xhat = np.einsum("nchw,nchw->c", g, xhat)
        _accum(beta, sum_g)
        _accum(gamma, sum_g_xhat)
        if train_mode:
            gscale = (gamma.data * inv).reshape(1, -1, 1, 1)
            mean_g = (sum_g / count).reshape(1, -1, 1, 1)
            mean_g_xhat = (sum_g_xhat / count).reshape(1, -1, 1, 1)
            _accum(x, gscale * (g - mean_g - xhat * mean_g_xhat))
        else:
            _accum(x, g * (gamma.data * inv).reshape(1, -1, 1, 1))

    return _make(data, (x, gamma, beta), backward)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

def grad_check(loss_fn: Callable[[], Tensor], params: Sequence[Tensor], step: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    64-bit only; error is |analytic - cd| / max(|analytic|, |cd|, 1e-8) taken
    over every scalar element of every parameter.
    """
    if not 1e-6 <= step <= 1e-3:
        raise ValueError(f"step must be in [1e-6, 1e-3], got {step}")
    for p in params:
        if p.dtype != np.float64:
            raise ValueError("grad_check requires float64 parameters")
    zero_grads(params)
    loss = loss_fn()
    if not np.isfinite(loss.data).all():
        raise FloatingPointError("grad_check: non-finite loss")
    loss.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else np.array(p.grad, dtype=np.float64)
                for p in params]
    worst = 0.0
    for p, an in zip(params, analytic):
        flat = p.data.reshape(-1)
        an_flat = an.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = float(loss_fn().data)
            flat[i] = orig - step
            down = float(loss_fn().data)
            flat[i] = orig
            cd = (up - down) / (2.0 * step)
            err = abs(an_flat[i] - cd) / max(abs(an_flat[i]), abs(cd), 1e-8)
            worst = max(worst, err)
    return worst

"""Independent reference implementations used as test oracles.

These stay deliberately naive (literal loops, exhaustive enumeration) and
never call back into the library's fast paths.
"""

from __future__ import annotations

import itertools

import numpy as np


def naive_conv(x: np.ndarray, w: np.ndarray, b: np.ndarray, stride: int, padding: int,
               groups: int) -> np.ndarray:
    """Six-nested-loop direct-summation cross-correlation."""
    n, cin, h, wd = x.shape
    cout, cpg, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    out = np.zeros((n, cout, ho, wo), dtype=x.dtype)
    og = cout // groups
    for nn in range(n):
        for oc in range(cout):
            g = oc // og
            for y in range(ho):
                for xx in range(wo):
                    acc = x.dtype.type(0.0)
                    for ic in range(cpg):
                        for i in range(kh):
                            for j in range(kw):
                                acc += w[oc, ic, i, j] * xp[nn, g * cpg + ic, y * stride + i, xx * stride + j]
                    out[nn, oc, y, xx] = acc + b[oc]
    return out


def eval_bn(x: np.ndarray, gamma, beta, mean, var, eps: float) -> np.ndarray:
    """The eval-mode normalization formula, written out directly."""
    return (gamma.reshape(1, -1, 1, 1) * (x - mean.reshape(1, -1, 1, 1))
            / np.sqrt(var.reshape(1, -1, 1, 1) + eps) + beta.reshape(1, -1, 1, 1))


def pair_iou(a, b) -> float:
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    union = ((a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter)
    return inter / union if union > 0 else 0.0


def brute_force_nms(boxes: np.ndarray, scores: np.ndarray, thresh: float) -> set[int]:
    """All-subset suppression oracle.

    The valid survivor set S satisfies, for every box i:
        i in S  <=>  no j in S with higher priority and IoU(i,j) > thresh
    (priority: higher score wins, ties by lower index). Exactly one subset
    satisfies this; found by checking every subset.
    """
    n = len(scores)

    def priority(i):
        return (-scores[i], i)

    valid = []
    for bits in itertools.product([0, 1], repeat=n):
        s = {i for i in range(n) if bits[i]}
        ok = True
        for i in range(n):
            suppressed = any(j in s and priority(j) < priority(i)
                             and pair_iou(boxes[i], boxes[j]) > thresh for j in range(n))
            if (i in s) == suppressed:
                ok = False
                break
        if ok:
            valid.append(s)
    assert len(valid) == 1, f"suppression rule admitted {len(valid)} subsets"
    return valid[0]

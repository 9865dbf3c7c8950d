"""Energy accounting: watts from traces, performance-per-watt, cost proxies.

Power is the time-normalized energy of the model minus an "empty" baseline
(same topology, every layer one channel wide):

    power = sum_i(e_model_i - e_empty_i) / total_time

and the tradeoff score is mean performance divided by that power. Absolute
wattage is hardware-bound and comes only from ingested traces; the analytical
cost model (MACs + activation traffic) is the hardware-free proxy used for
structure comparisons, e.g. the fusion-graph traffic of a top-down pyramid
neck versus the single-output shared neck.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .model import BackboneRow, CostItem, FemtoNet, ModelConfig


@dataclass
class EnergyTrace:
    """Per-image energy samples (joules) plus the total evaluation time."""

    energy_joules: np.ndarray
    total_time_seconds: float
    label: str = "model"

    def __post_init__(self):
        self.energy_joules = np.asarray(self.energy_joules, dtype=np.float64).reshape(-1)
        if self.energy_joules.size < 1:
            raise ValueError("trace needs at least one sample")
        if self.total_time_seconds <= 0:
            raise ValueError(f"total time must be positive, got {self.total_time_seconds}")
        if np.any(self.energy_joules < 0):
            raise ValueError("energy samples must be non-negative")


@dataclass
class PerfSeries:
    """Per-image performance values, or one dataset-level value (N=1)."""

    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64).reshape(-1)
        if self.values.size < 1:
            raise ValueError("performance series is empty")

    @staticmethod
    def scalar(value: float) -> "PerfSeries":
        return PerfSeries(np.array([value]))

    @property
    def mean(self) -> float:
        return float(self.values.mean())


@dataclass
class EPTReport:
    power_watts: float
    mean_perf: float
    mept: float

    def as_text(self) -> str:
        return (f"power_watts={self.power_watts!r}\n"
                f"mean_perf={self.mean_perf!r}\n"
                f"mept={self.mept:.2f}")


def compute_power(model_trace: EnergyTrace, empty_trace: EnergyTrace) -> float:
    """Watts: summed per-image energy surplus over the empty baseline, divided
    by the model trace's total time. Negative results (baseline exceeded the
    model) are flagged with a warning but returned as-is."""
    if model_trace.energy_joules.size != empty_trace.energy_joules.size:
        raise ValueError(
            f"trace length mismatch: {model_trace.energy_joules.size} vs "
            f"{empty_trace.energy_joules.size}")
    power = float((model_trace.energy_joules - empty_trace.energy_joules).sum()
                  / model_trace.total_time_seconds)
    if power < 0:
        warnings.warn(f"negative power ({power:.4g} W): baseline exceeded model", RuntimeWarning)
    return power


def compute_mept(perf: PerfSeries, power_watts: float) -> EPTReport:
    """Mean performance per watt; power must be strictly positive."""
    if power_watts <= 0:
        raise ValueError(f"power must be positive, got {power_watts}")
    mean_perf = perf.mean
    return EPTReport(power_watts=power_watts, mean_perf=mean_perf,
                     mept=mean_perf / power_watts)


def make_empty_config(cfg: ModelConfig) -> ModelConfig:
    """Same topology, every layer one channel wide (the energy baseline)."""
    rows = [BackboneRow(None if r.t is None else 1, 1, r.n, r.s) for r in cfg.backbone]
    return ModelConfig(
        input_size=cfg.input_size,
        backbone=rows,
        neck_channels=1,
        neck_taps=list(cfg.neck_taps),
        num_classes=cfg.num_classes,
        head_width=1,
        use_ibe=cfg.use_ibe,
    )


# ---------------------------------------------------------------------------
# trace files
# ---------------------------------------------------------------------------


class TraceError(ValueError):
    """Malformed trace CSV; the message names the line number."""


def ingest_trace(path, label: str = "model") -> EnergyTrace:
    """CSV with header ``index,energy_joules`` and footer
    ``total_time_seconds,<value>``."""
    with open(path, "r", encoding="utf-8") as f:
        lines = [ln.strip() for ln in f.read().split("\n")]
    while lines and not lines[-1]:
        lines.pop()
    if not lines or lines[0] != "index,energy_joules":
        raise TraceError("line 1: expected header 'index,energy_joules'")
    if len(lines) < 2 or not lines[-1].startswith("total_time_seconds,"):
        raise TraceError(f"line {len(lines)}: missing footer 'total_time_seconds,<value>'")
    try:
        total_time = float(lines[-1].split(",", 1)[1])
    except (IndexError, ValueError) as err:
        raise TraceError(f"line {len(lines)}: bad total_time_seconds value") from err
    body = lines[1:-1]
    if not body:
        raise TraceError("no samples")
    energies = []
    seen = {}
    prev = -1
    for offset, line in enumerate(body):
        line_no = offset + 2
        parts = line.split(",")
        if len(parts) != 2:
            raise TraceError(f"line {line_no}: expected 'index,energy_joules'")
        try:
            idx = int(parts[0])
            e = float(parts[1])
        except ValueError as err:
            raise TraceError(f"line {line_no}: malformed row {line!r}") from err
        if idx in seen:
            raise TraceError(f"line {line_no}: duplicate index {idx} (first at line {seen[idx]})")
        if idx <= prev:
            raise TraceError(f"line {line_no}: non-monotone index {idx}")
        if e < 0:
            raise TraceError(f"line {line_no}: negative energy {e}")
        seen[idx] = line_no
        prev = idx
        energies.append(e)
    return EnergyTrace(np.array(energies), total_time, label)


def write_trace(path, energies, total_time_seconds: float):
    with open(path, "w", encoding="utf-8") as f:
        f.write("index,energy_joules\n")
        for i, e in enumerate(energies):
            f.write(f"{i},{e!r}\n")
        f.write(f"total_time_seconds,{total_time_seconds!r}\n")


# ---------------------------------------------------------------------------
# analytical cost model
# ---------------------------------------------------------------------------

BYTES_PER_ELEM = 4  # float32 activations


@dataclass
class CostReport:
    macs: int
    param_count: int
    activation_bytes_read: int
    activation_bytes_written: int
    per_layer: list[CostItem] = field(default_factory=list)


def estimate_cost(net: FemtoNet, input_shape: tuple[int, int, int, int]) -> CostReport:
    """Structural walk: per-conv MACs = out_elems * kh*kw*in/groups;
    activation traffic counts each conv's input read and output write, plus
    explicit entries for residual adds, the neck's upsample/sum, and branch
    merges. Elementwise norm/activation work is treated as fused (no traffic
    of its own)."""
    from .model import count_params

    _, _, items = net.plan(input_shape)
    macs = sum(it.macs for it in items)
    read = sum(it.read_elems for it in items) * BYTES_PER_ELEM
    written = sum(it.write_elems for it in items) * BYTES_PER_ELEM
    return CostReport(macs=macs, param_count=count_params(net).total,
                      activation_bytes_read=read, activation_bytes_written=written,
                      per_layer=items)


def _elems(shape) -> int:
    return int(np.prod(shape))


def sharedneck_traffic(tap_shapes: list[tuple[int, int, int, int]], channels: int,
                       bytes_per_elem: int = BYTES_PER_ELEM) -> int:
    """Fusion-graph activation traffic (bytes) for the single-output neck.

    Each tap is read once (channel alignment), everything is upsampled to the
    largest resolution, summed into one map, fused by one DSC, and read once
    by the single head."""
    target = max((s[2], s[3]) for s in tap_shapes)
    n = tap_shapes[0][0]
    full = n * channels * target[0] * target[1]
    total = 0
    for s in tap_shapes:
        aligned = n * channels * s[2] * s[3]
        total += _elems(s) + aligned            # align conv: read tap, write aligned
        if (s[2], s[3]) != target:
            total += aligned + full             # upsample: read aligned, write full
    total += len(tap_shapes) * full + full      # sum: read all aligned, write one
    total += 2 * (full + full)                  # fusion DSC (dw + pw): read/write each
    total += full                               # head reads the single output
    return total * bytes_per_elem


def fpn_traffic(tap_shapes: list[tuple[int, int, int, int]], channels: int,
                bytes_per_elem: int = BYTES_PER_ELEM) -> int:
    """Top-down pyramid traffic: per level a lateral conv, a merge with the
    upsampled deeper level (each level is read twice: once as a lateral, once
    as the merged map feeding the output conv), a 3x3 output conv, and one
    head read per level."""
    shapes = sorted(tap_shapes, key=lambda s: s[2])  # deepest (smallest) first
    n = shapes[0][0]
    level = [n * channels * s[2] * s[3] for s in shapes]
    total = 0
    for s, el in zip(shapes, level):
        total += _elems(s) + el                 # lateral conv: read tap, write lateral
    for i in range(1, len(level)):
        total += level[i - 1] + level[i]        # upsample deeper merged: read, write
        total += 2 * level[i] + level[i]        # merge: read lateral + upsampled, write
    for el in level:
        total += el + el                        # per-level 3x3 output conv
        total += el                             # per-level head read
    return total * bytes_per_elem


def pan_traffic(tap_shapes: list[tuple[int, int, int, int]], channels: int,
                bytes_per_elem: int = BYTES_PER_ELEM) -> int:
    """Pyramid with an extra bottom-up pass after the top-down one."""
    shapes = sorted(tap_shapes, key=lambda s: s[2])
    n = shapes[0][0]
    level = [n * channels * s[2] * s[3] for s in shapes]
    total = fpn_traffic(tap_shapes, channels, bytes_per_elem=1)
    for i in range(len(level) - 2, -1, -1):
        total += level[i + 1] + level[i]        # downsample shallower: read, write
        total += 2 * level[i] + level[i]        # merge and write
        total += level[i] + level[i]            # output conv
    return total * bytes_per_elem


def neck_tap_shapes(net: FemtoNet, input_shape: tuple[int, int, int, int]) -> list[tuple]:
    stage_shapes, _, _ = net.plan(input_shape)
    return [stage_shapes[t] for t in net.cfg.neck_taps]

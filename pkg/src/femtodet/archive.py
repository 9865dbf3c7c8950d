"""Binary weight archive.

Layout (little-endian, no padding between records):

    magic   7 bytes  b"FEMTO1\\x00"
    count   u32      number of tensors
    per tensor:
        name_len u32, name utf-8,
        ndim u32, dims ndim x u32,
        values prod(dims) x f32

Round-trip save -> load is bit-identical; names are unique. Model archives
additionally carry a ``meta.folded`` marker so a folded checkpoint reloads
into the folded structure.
"""

from __future__ import annotations

import struct

import numpy as np

from .model import FemtoNet, ModelConfig, fold_model

MAGIC = b"FEMTO1\x00"


class ArchiveError(ValueError):
    """Malformed archive; the message names the byte offset or record."""


def save_archive(path, tensors: dict[str, np.ndarray]):
    seen = set()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors.items():
            if name in seen:
                raise ArchiveError(f"duplicate tensor name {name!r}")
            seen.add(name)
            nb = name.encode("utf-8")
            arr = np.ascontiguousarray(arr, dtype="<f4")
            f.write(struct.pack("<I", len(nb)))
            f.write(nb)
            f.write(struct.pack("<I", arr.ndim))
            if arr.ndim:
                f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.tobytes())


def load_archive(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[: len(MAGIC)] != MAGIC:
        raise ArchiveError(f"bad magic at offset 0: expected {MAGIC!r}")
    off = len(MAGIC)

    def take(n: int, what: str) -> bytes:
        nonlocal off
        if off + n > len(blob):
            raise ArchiveError(f"truncated archive at offset {off} while reading {what}")
        piece = blob[off : off + n]
        off += n
        return piece

    (count,) = struct.unpack("<I", take(4, "tensor count"))
    out: dict[str, np.ndarray] = {}
    for i in range(count):
        (name_len,) = struct.unpack("<I", take(4, f"name length of tensor {i}"))
        name = take(name_len, f"name of tensor {i}").decode("utf-8")
        if name in out:
            raise ArchiveError(f"duplicate tensor name {name!r} (tensor {i})")
        (ndim,) = struct.unpack("<I", take(4, f"ndim of {name!r}"))
        dims = struct.unpack(f"<{ndim}I", take(4 * ndim, f"dims of {name!r}")) if ndim else ()
        n_vals = int(np.prod(dims)) if ndim else 1
        raw = take(4 * n_vals, f"values of {name!r}")
        out[name] = np.frombuffer(raw, dtype="<f4").reshape(dims).copy()
    if off != len(blob):
        raise ArchiveError(f"{len(blob) - off} trailing bytes at offset {off}")
    return out


def save_model(path, net: FemtoNet, folded: bool = False, extra: dict[str, np.ndarray] | None = None):
    tensors: dict[str, np.ndarray] = {"meta.folded": np.array([1.0 if folded else 0.0], dtype=np.float32)}
    if extra:
        tensors.update(extra)
    tensors.update(net.state_dict())
    save_archive(path, tensors)


def load_model(path, cfg: ModelConfig, dtype=np.float32) -> tuple[FemtoNet, bool]:
    """Rebuild a network from the config and populate it from the archive."""
    arch = load_archive(path)
    folded = bool(arch.get("meta.folded", np.zeros(1))[0])
    net = FemtoNet(cfg, seed=0, dtype=dtype)
    net.set_mode("eval")
    if folded:
        net = fold_model(net)
    state = {k: v for k, v in arch.items() if not (k.startswith("meta.") or k.startswith("train."))}
    expected = {name for name, _ in net.named_state()}
    unexpected = sorted(set(state) - expected)
    if unexpected:
        raise ArchiveError(f"archive holds tensors the model does not: {unexpected[:4]}")
    net.load_state(state)
    return net, folded

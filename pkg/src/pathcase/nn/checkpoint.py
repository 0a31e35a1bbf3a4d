"""The ``MZCK`` named-tensor container used for checkpoints and embeddings."""

from __future__ import annotations

import struct

import numpy as np
import torch

from ..io import atomic_write

MAGIC = b"MZCK"
VERSION = 1


class CheckpointError(ValueError):
    pass


def write_tensors(tensors: dict, sink) -> int:
    """Write ``{name: array}`` records; values are stored as little-endian f32."""
    n = 0

    def put(b):
        nonlocal n
        sink.write(b)
        n += len(b)

    put(MAGIC + struct.pack("<II", VERSION, len(tensors)))
    for name, value in tensors.items():
        if isinstance(value, torch.Tensor):
            value = value.detach().cpu().numpy()
        arr = np.asarray(value, dtype="<f4")
        raw = name.encode("utf-8")
        if arr.ndim > 255:
            raise CheckpointError(f"tensor {name} has rank {arr.ndim} > 255")
        put(struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim))
        put(struct.pack(f"<{arr.ndim}I", *arr.shape))
        put(np.ascontiguousarray(arr).tobytes())
    return n


def _take(source, n, what):
    data = source.read(n)
    if len(data) != n:
        raise CheckpointError(f"truncated {what}: expected {n} bytes, got {len(data)}")
    return data


def read_tensors(source) -> dict:
    """Inverse of :func:`write_tensors`; returns ``{name: float32 ndarray}`` in file order."""
    head = _take(source, 12, "header")
    if head[:4] != MAGIC:
        raise CheckpointError(f"bad magic {head[:4]!r}, expected {MAGIC!r}")
    version, count = struct.unpack("<II", head[4:])
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    out = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", _take(source, 2, "name length"))
        name = _take(source, nlen, "name").decode("utf-8")
        (rank,) = struct.unpack("<B", _take(source, 1, "rank"))
        dims = struct.unpack(f"<{rank}I", _take(source, 4 * rank, "dims"))
        size = int(np.prod(dims, dtype=np.int64)) if rank else 1
        data = np.frombuffer(_take(source, 4 * size, f"data of {name}"), dtype="<f4")
        out[name] = data.astype(np.float32).reshape(dims)
    return out


def save(path, tensors: dict) -> int:
    with atomic_write(path) as fh:
        return write_tensors(tensors, fh)


def load(path) -> dict:
    with open(path, "rb") as fh:
        return read_tensors(fh)


def module_tensors(module: torch.nn.Module, prefix: str) -> dict:
    return {prefix + k: v for k, v in module.state_dict().items()}


def load_module(module: torch.nn.Module, tensors: dict, prefix: str, strict=True):
    """Load every ``prefix``-named record into ``module`` (dtype follows the module)."""
    ref = module.state_dict()
    picked = {k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)}
    missing = sorted(set(ref) - set(picked))
    if strict and missing:
        raise CheckpointError(f"checkpoint lacks {prefix}{missing[0]} (and {len(missing) - 1} more)")
    state = {}
    for k, v in picked.items():
        if k not in ref:
            if strict:
                raise CheckpointError(f"unexpected record {prefix}{k}")
            continue
        t = torch.as_tensor(np.asarray(v))
        if tuple(t.shape) != tuple(ref[k].shape):
            raise CheckpointError(
                f"shape mismatch for {prefix}{k}: {tuple(t.shape)} vs {tuple(ref[k].shape)}"
            )
        state[k] = t.to(ref[k].dtype)
    module.load_state_dict(state, strict=strict)

"""Versioned binary checkpoint container.

Layout (all integers little-endian):

    magic            8 bytes   b"MUXTCKPT"
    version          u32       currently 1
    config_len       u32
    config           utf-8 JSON blob (model/build configuration)
    n_tensors        u32
    n_tensors times:
        name_len     u16
        name         utf-8
        ndim         u8
        shape        u32 * ndim
        data         f32, little-endian, C order
    has_optimizer    u8
    if has_optimizer:
        step         u32       optimizer step count
        hypers       f64 * 5   lr, beta1, beta2, eps, weight_decay
        n_tensors    u32       moment tensors, same entry layout as above

Tensors are stored as 32-bit floats regardless of the in-memory dtype.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"MUXTCKPT"
VERSION = 1


def _write_tensors(fh, tensors: dict[str, np.ndarray]):
    fh.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        arr = np.ascontiguousarray(arr, dtype="<f4")
        fh.write(struct.pack("<H", len(raw)))
        fh.write(raw)
        fh.write(struct.pack("<B", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(arr.tobytes())


def _read_exact(fh, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise ValueError("truncated checkpoint")
    return buf


def _read_tensors(fh) -> dict[str, np.ndarray]:
    (count,) = struct.unpack("<I", _read_exact(fh, 4))
    tensors = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", _read_exact(fh, 2))
        name = _read_exact(fh, name_len).decode("utf-8")
        (ndim,) = struct.unpack("<B", _read_exact(fh, 1))
        shape = struct.unpack(f"<{ndim}I", _read_exact(fh, 4 * ndim))
        size = int(np.prod(shape)) if ndim else 1
        data = np.frombuffer(_read_exact(fh, 4 * size), dtype="<f4").reshape(shape)
        tensors[name] = data.copy()
    return tensors


def save_checkpoint(path, tensors: dict[str, np.ndarray], config_json: str,
                    optimizer: dict | None = None):
    """Write a checkpoint.

    ``optimizer`` is ``{"step": int, "hypers": (lr, b1, b2, eps, wd),
    "tensors": {...}}`` or None.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        blob = config_json.encode("utf-8")
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        _write_tensors(fh, tensors)
        if optimizer is None:
            fh.write(struct.pack("<B", 0))
        else:
            fh.write(struct.pack("<B", 1))
            fh.write(struct.pack("<I", optimizer["step"]))
            fh.write(struct.pack("<5d", *optimizer["hypers"]))
            _write_tensors(fh, optimizer["tensors"])


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], str, dict | None]:
    """Read a checkpoint; returns (tensors, config_json, optimizer_or_None)."""
    with open(path, "rb") as fh:
        if _read_exact(fh, 8) != MAGIC:
            raise ValueError("not a checkpoint file (bad magic)")
        (version,) = struct.unpack("<I", _read_exact(fh, 4))
        if version != VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        (config_len,) = struct.unpack("<I", _read_exact(fh, 4))
        config_json = _read_exact(fh, config_len).decode("utf-8")
        tensors = _read_tensors(fh)
        (has_opt,) = struct.unpack("<B", _read_exact(fh, 1))
        optimizer = None
        if has_opt:
            (step,) = struct.unpack("<I", _read_exact(fh, 4))
            hypers = struct.unpack("<5d", _read_exact(fh, 40))
            optimizer = {"step": step, "hypers": hypers, "tensors": _read_tensors(fh)}
    return tensors, config_json, optimizer

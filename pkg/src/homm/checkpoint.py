"""Binary checkpoints: a versioned header and layer table, then raw float64 values.

Layout (little endian)::

    magic   8 bytes  b"HOMMCKPT"
    version u32
    z_dim   u32
    epoch   u32
    n       u32                      number of parameter tensors
    n x     [name_len u16, name utf-8, ndim u8, dims u32 * ndim]
    values  float64, tensors in table order, each row-major
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"HOMMCKPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(model, path, epoch: int = 0) -> None:
    params = model.named_parameters()
    header = [MAGIC, struct.pack("<IIII", VERSION, model.z_dim, epoch, len(params))]
    for name, p in params:
        raw = name.encode()
        header.append(struct.pack("<H", len(raw)) + raw)
        header.append(struct.pack("<B", p.data.ndim) + struct.pack(f"<{p.data.ndim}I", *p.data.shape))
    body = b"".join(np.ascontiguousarray(p.data, dtype="<f8").tobytes() for _, p in params)
    Path(path).write_bytes(b"".join(header) + body)


def read_checkpoint(path) -> tuple[dict, list[tuple[str, np.ndarray]]]:
    buf = Path(path).read_bytes()
    if buf[:8] != MAGIC:
        raise CheckpointError("not a HoMM checkpoint")
    version, z_dim, epoch, n = struct.unpack_from("<IIII", buf, 8)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    off = 24
    table = []
    for _ in range(n):
        (ln,) = struct.unpack_from("<H", buf, off)
        off += 2
        name = buf[off:off + ln].decode()
        off += ln
        (nd,) = struct.unpack_from("<B", buf, off)
        off += 1
        shape = struct.unpack_from(f"<{nd}I", buf, off)
        off += 4 * nd
        table.append((name, shape))
    arrays = []
    for name, shape in table:
        size = int(np.prod(shape))
        a = np.frombuffer(buf, dtype="<f8", count=size, offset=off).reshape(shape).copy()
        off += 8 * size
        arrays.append((name, a))
    if off != len(buf):
        raise CheckpointError("trailing bytes in checkpoint")
    return {"version": version, "z_dim": z_dim, "epoch": epoch}, arrays


def load_checkpoint(model, path) -> dict:
    """Copy stored values into ``model``; names, shapes and Z must agree."""
    meta, arrays = read_checkpoint(path)
    if meta["z_dim"] != model.z_dim:
        raise CheckpointError(f"checkpoint Z={meta['z_dim']} but model Z={model.z_dim}")
    params = model.named_parameters()
    if [n for n, _ in params] != [n for n, _ in arrays]:
        raise CheckpointError("checkpoint layer table does not match the model")
    for (name, p), (_, a) in zip(params, arrays):
        if p.data.shape != a.shape:
            raise CheckpointError(f"shape mismatch for {name}")
        p.data[...] = a
    return meta

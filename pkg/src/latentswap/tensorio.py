"""Raw tensor file format and the containers built on it.

Single tensor: magic "LSWP", version byte, rank byte, rank u32 little-endian
extents, then the float32 payload in row-major order.

Weights container: ASCII manifest header listing (name, shape) pairs in fixed
order, followed by one raw tensor record per entry.

Concept file: one text header line naming the token index, then a raw tensor
(a single embedding row or a token-sequence matrix).
"""

from __future__ import annotations

import struct
from typing import BinaryIO

import numpy as np

from .errors import ConfigError
from .numerics import FLOAT

MAGIC = b"LSWP"
VERSION = 1


def write_tensor(f: BinaryIO, x: np.ndarray) -> None:
    x = np.ascontiguousarray(x, dtype=FLOAT)
    f.write(MAGIC)
    f.write(struct.pack("<BB", VERSION, x.ndim))
    f.write(struct.pack(f"<{x.ndim}I", *x.shape))
    f.write(x.astype("<f4").tobytes())


def read_tensor(f: BinaryIO) -> np.ndarray:
    magic = f.read(4)
    if magic != MAGIC:
        raise ConfigError(f"bad tensor magic {magic!r}")
    version, rank = struct.unpack("<BB", f.read(2))
    if version != VERSION:
        raise ConfigError(f"unsupported tensor version {version}")
    shape = struct.unpack(f"<{rank}I", f.read(4 * rank))
    count = int(np.prod(shape, dtype=np.int64)) if rank else 1
    payload = f.read(4 * count)
    if len(payload) != 4 * count:
        raise ConfigError("truncated tensor payload")
    return np.frombuffer(payload, dtype="<f4").astype(FLOAT).reshape(shape)


def save_tensor(path, x: np.ndarray) -> None:
    with open(path, "wb") as f:
        write_tensor(f, x)


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as f:
        return read_tensor(f)


def save_weights(path, weights: dict[str, np.ndarray]) -> None:
    """Write named tensors with a manifest header preserving insertion order."""
    with open(path, "wb") as f:
        f.write(b"LSWP-WEIGHTS 1 %d\n" % len(weights))
        for name, x in weights.items():
            dims = "x".join(str(d) for d in x.shape)
            f.write(f"{name} {dims}\n".encode("ascii"))
        for x in weights.values():
            write_tensor(f, x)


def load_weights(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as f:
        header = f.readline().split()
        if len(header) != 3 or header[0] != b"LSWP-WEIGHTS" or header[1] != b"1":
            raise ConfigError(f"bad weights header in {path}")
        count = int(header[2])
        manifest = []
        for _ in range(count):
            name, dims = f.readline().decode("ascii").split()
            shape = tuple(int(d) for d in dims.split("x"))
            manifest.append((name, shape))
        out = {}
        for name, shape in manifest:
            x = read_tensor(f)
            if x.shape != shape:
                raise ConfigError(f"weights entry {name}: manifest says {shape}, record has {x.shape}")
            out[name] = x
        return out


def save_concept(path, token_index: int, embedding: np.ndarray) -> None:
    with open(path, "wb") as f:
        f.write(b"token-index %d\n" % token_index)
        write_tensor(f, np.atleast_2d(embedding))


def load_concept(path) -> tuple[int, np.ndarray]:
    """Returns (token index, rows) where rows is (n, d_text)."""
    with open(path, "rb") as f:
        parts = f.readline().split()
        if len(parts) != 2 or parts[0] != b"token-index":
            raise ConfigError(f"bad concept header in {path}")
        index = int(parts[1])
        rows = read_tensor(f)
    if rows.ndim == 1:
        rows = rows[None, :]
    if rows.ndim != 2:
        raise ConfigError(f"concept tensor must be rank 1 or 2, got rank {rows.ndim}")
    if index < 0:
        raise ConfigError(f"negative token index {index}")
    return index, rows

"""Binary PGM (P5) / PPM (P6) image I/O.

8-bit images throughout, except soft masks which are written as 16-bit PGM
(maxval 65535, big-endian sample order as PNM requires).
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigError


def _read_header(f, magic: bytes):
    if f.read(2) != magic:
        raise ConfigError(f"not a {magic.decode()} file")
    fields = []
    while len(fields) < 3:
        line = f.readline()
        if not line:
            raise ConfigError("truncated PNM header")
        body = line.split(b"#", 1)[0]
        fields.extend(int(tok) for tok in body.split())
    return fields[:3]  # width, height, maxval


def read_pgm(path) -> np.ndarray:
    """Read an 8-bit grayscale P5 image as (H, W) uint8."""
    with open(path, "rb") as f:
        w, h, maxval = _read_header(f, b"P5")
        if maxval != 255:
            raise ConfigError(f"expected 8-bit PGM, maxval {maxval}")
        data = f.read(w * h)
    if len(data) != w * h:
        raise ConfigError("truncated PGM payload")
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w)


def read_ppm(path) -> np.ndarray:
    """Read an 8-bit color P6 image as (H, W, 3) uint8."""
    with open(path, "rb") as f:
        w, h, maxval = _read_header(f, b"P6")
        if maxval != 255:
            raise ConfigError(f"expected 8-bit PPM, maxval {maxval}")
        data = f.read(w * h * 3)
    if len(data) != w * h * 3:
        raise ConfigError("truncated PPM payload")
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w, 3)


def write_pgm(path, img: np.ndarray) -> None:
    img = np.asarray(img, dtype=np.uint8)
    if img.ndim != 2:
        raise ValueError("write_pgm expects (H, W)")
    with open(path, "wb") as f:
        f.write(b"P5\n%d %d\n255\n" % (img.shape[1], img.shape[0]))
        f.write(img.tobytes())


def write_ppm(path, img: np.ndarray) -> None:
    img = np.asarray(img, dtype=np.uint8)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError("write_ppm expects (H, W, 3)")
    with open(path, "wb") as f:
        f.write(b"P6\n%d %d\n255\n" % (img.shape[1], img.shape[0]))
        f.write(img.tobytes())


def write_pgm16(path, field: np.ndarray) -> None:
    """Write a [0, 1] field as 16-bit PGM scaled by 65535."""
    field = np.asarray(field, dtype=np.float64)
    if field.ndim != 2:
        raise ValueError("write_pgm16 expects (H, W)")
    scaled = np.clip(np.floor(field * 65535.0 + 0.5), 0, 65535).astype(">u2")
    with open(path, "wb") as f:
        f.write(b"P5\n%d %d\n65535\n" % (field.shape[1], field.shape[0]))
        f.write(scaled.tobytes())

"""Dense tensor substrate: softmax, 2-D convolution, bilinear resize, Gaussian
kernels and seeded Gaussian sampling.

Arrays are float32 row-major; reductions accumulate in float64 so results stay
tight enough for finite-difference checks at toy sizes. Every public operation
validates that its output is finite.
"""

from __future__ import annotations

import numpy as np

from .errors import NumericError

FLOAT = np.float32


def ensure_finite(name: str, x: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NumericError(f"{name} contains NaN or Inf")
    return x


class SeededRng:
    """Deterministic Gaussian source. Equal seeds give bit-identical streams."""

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.PCG64(self.seed))
        self.position = 0

    def normal(self, shape, dtype=FLOAT) -> np.ndarray:
        out = self._gen.standard_normal(size=shape, dtype=np.float64).astype(dtype)
        self.position += int(np.prod(shape, dtype=np.int64))
        return out

    def integers(self, low: int, high: int) -> int:
        self.position += 1
        return int(self._gen.integers(low, high))


def softmax_rows(x: np.ndarray) -> np.ndarray:
    """Row-wise softmax with max subtraction; each row sums to 1."""
    x = np.asarray(x)
    if x.ndim != 2:
        raise ValueError(f"softmax_rows expects a rank-2 array, got rank {x.ndim}")
    ensure_finite("softmax input", x)
    shifted = x - x.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    denom = e.sum(axis=1, keepdims=True, dtype=np.float64)
    out = (e / denom).astype(x.dtype)
    return ensure_finite("softmax output", out)


def conv2d(x: np.ndarray, kernel: np.ndarray, padding: str = "replicate") -> np.ndarray:
    """Correlate an H x W field with an odd-sized kernel.

    out[i, j] = sum_{a,b} kernel[a, b] * x_padded[i + a - r, j + b - r]

    padding is "replicate" (edge values extended) or "zero".
    """
    x = np.asarray(x)
    kernel = np.asarray(kernel, dtype=np.float64)
    if x.ndim != 2 or kernel.ndim != 2:
        raise ValueError("conv2d expects rank-2 field and kernel")
    kh, kw = kernel.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError(f"kernel extents must be odd, got {kernel.shape}")
    if padding not in ("replicate", "zero"):
        raise ValueError(f"unknown padding {padding!r}")
    ry, rx = kh // 2, kw // 2
    mode = "edge" if padding == "replicate" else "constant"
    xp = np.pad(x.astype(np.float64), ((ry, ry), (rx, rx)), mode=mode)
    windows = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw))
    out = np.einsum("ijab,ab->ij", windows, kernel).astype(x.dtype)
    return ensure_finite("conv2d output", out)


def bilinear_weights(n_in: int, n_out: int) -> np.ndarray:
    """(n_out, n_in) interpolation matrix, corner-aligned.

    Same-size resize is an exact identity; a single output sample falls at the
    input center.
    """
    if n_in <= 0 or n_out <= 0:
        raise ValueError("extents must be positive")
    w = np.zeros((n_out, n_in), dtype=np.float64)
    if n_out == 1:
        pos = np.array([(n_in - 1) / 2.0])
    else:
        pos = np.arange(n_out, dtype=np.float64) * (n_in - 1) / (n_out - 1)
    lo = np.clip(np.floor(pos).astype(int), 0, n_in - 1)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = pos - lo
    w[np.arange(n_out), lo] += 1.0 - frac
    w[np.arange(n_out), hi] += frac
    return w


def resize_bilinear(x: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Corner-aligned bilinear resize of an H x W field."""
    x = np.asarray(x)
    if x.ndim != 2:
        raise ValueError("resize_bilinear expects a rank-2 field")
    h, w = x.shape
    if (out_h, out_w) == (h, w):
        return x.copy()
    wr = bilinear_weights(h, out_h)
    wc = bilinear_weights(w, out_w)
    out = (wr @ x.astype(np.float64) @ wc.T).astype(x.dtype)
    return ensure_finite("resize output", out)


def gaussian_kernel(sigma: float, radius: int) -> np.ndarray:
    """Normalized (2r+1)^2 Gaussian kernel, values prop. to exp(-(dx^2+dy^2)/2s^2)."""
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    if radius < 0:
        raise ValueError(f"radius must be nonnegative, got {radius}")
    ax = np.arange(-radius, radius + 1, dtype=np.float64)
    g = np.exp(-(ax[:, None] ** 2 + ax[None, :] ** 2) / (2.0 * sigma**2))
    g /= g.sum()
    return g.astype(FLOAT)

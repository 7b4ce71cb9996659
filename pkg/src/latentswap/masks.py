"""Mask machinery: binary masks, elliptical dilation, Gaussian feathering,
temporal annealing, and fitting masks to the shapes of latents and attention
variables.

Binary masks come from P5 PGM files where 0 is background and 255 is the swap
region; any other pixel value is rejected. Soft masks are H x W fields in
[0, 1] that stay exactly 1 on the original foreground.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import pgm
from .numerics import FLOAT, conv2d, gaussian_kernel, resize_bilinear

DEFAULT_DILATE_EXTENT = 5
DEFAULT_BLUR_SIGMA = 2.0
DEFAULT_BLUR_RADIUS = 4
DEFAULT_ANNEAL_STEPS = 30


def load_binary_mask(path) -> np.ndarray:
    """Read a binary mask PGM; 0 -> 0.0, 255 -> 1.0, anything else errors."""
    raw = pgm.read_pgm(path)
    bad = ~np.isin(raw, (0, 255))
    if bad.any():
        from .errors import ConfigError

        values = sorted(set(raw[bad].tolist()))[:5]
        raise ConfigError(f"mask {path} has non-binary pixel values {values}")
    return as_binary_mask(raw == 255)


def as_binary_mask(mask) -> np.ndarray:
    """Validate and return an H x W float32 field of exact 0/1 values."""
    m = np.asarray(mask)
    if m.ndim != 2:
        raise ValueError("mask must be rank 2")
    m = m.astype(FLOAT)
    if not np.isin(m, (0.0, 1.0)).all():
        raise ValueError("binary mask must contain only 0 and 1")
    if m.min() == m.max():
        warnings.warn("degenerate mask (all %d)" % int(m.flat[0]), stacklevel=2)
    return m


def save_soft_mask(path, mask: np.ndarray) -> None:
    pgm.write_pgm16(path, mask)


def structuring_element(extent: int) -> np.ndarray:
    """Elliptical element: offsets within Euclidean radius r + 1/2 of center."""
    if extent < 1 or extent % 2 == 0:
        raise ValueError(f"structuring element extent must be odd and >= 1, got {extent}")
    r = extent // 2
    ax = np.arange(-r, r + 1)
    return (ax[:, None] ** 2 + ax[None, :] ** 2 <= (r + 0.5) ** 2).astype(bool)


def dilate(mask: np.ndarray, extent: int) -> np.ndarray:
    """Binary dilation; output pixel is 1 iff the element centered there covers a 1."""
    m = as_binary_mask(mask).astype(bool)
    elem = structuring_element(extent)
    r = extent // 2
    h, w = m.shape
    out = np.zeros_like(m)
    for dy, dx in zip(*np.nonzero(elem)):
        dy, dx = dy - r, dx - r
        src = m[max(0, -dy) : h - max(0, dy), max(0, -dx) : w - max(0, dx)]
        out[max(0, dy) : h - max(0, -dy), max(0, dx) : w - max(0, -dx)] |= src
    return out.astype(FLOAT)


@dataclass(frozen=True)
class FeatherParams:
    extent: int = DEFAULT_DILATE_EXTENT
    sigma: float = DEFAULT_BLUR_SIGMA
    radius: int = DEFAULT_BLUR_RADIUS


def feather(mask: np.ndarray, extent: int = DEFAULT_DILATE_EXTENT,
            sigma: float = DEFAULT_BLUR_SIGMA, radius: int = DEFAULT_BLUR_RADIUS) -> np.ndarray:
    """Soft mask: Gaussian blur of the dilated mask, forced back to 1 on the
    original foreground. Replicate padding keeps borders from darkening."""
    m = as_binary_mask(mask)
    grown = dilate(m, extent)
    blurred = conv2d(grown, gaussian_kernel(sigma, radius), padding="replicate")
    soft = np.where(m == 1.0, np.float32(1.0), blurred)
    return np.clip(soft, 0.0, 1.0).astype(FLOAT)


@dataclass(frozen=True)
class AnnealSchedule:
    """Linear foreground ramp over the first k_anneal sampling steps; 0 disables."""

    k_anneal: int = DEFAULT_ANNEAL_STEPS

    def __post_init__(self):
        if self.k_anneal < 0:
            raise ValueError("k_anneal must be >= 0")

    def ramp(self, t_step: int) -> float:
        if t_step < 0:
            raise ValueError("t_step must be >= 0")
        if self.k_anneal == 0:
            return 1.0
        return min(t_step / self.k_anneal, 1.0)


def anneal(mask: np.ndarray, t_step: int, schedule: AnnealSchedule) -> np.ndarray:
    """Scale foreground values by the ramp; zero pixels stay zero regardless."""
    m = np.asarray(mask, dtype=FLOAT)
    return (m * FLOAT(schedule.ramp(t_step))).astype(FLOAT)


@dataclass(frozen=True)
class VariableDescriptor:
    """Target layout for fit_to.

    kind "latent" uses (h, w) only. Attention kinds resize the mask to the
    layer grid (h, w), flatten it to the h*w query axis, and broadcast over
    the second axis: keys for "self_map", cols tokens for "cross_map", cols
    channels for "self_out".
    """

    kind: str
    h: int
    w: int
    cols: int = 0

    def __post_init__(self):
        if self.kind not in ("latent", "self_map", "cross_map", "self_out"):
            raise ValueError(f"unknown variable kind {self.kind!r}")
        if self.h <= 0 or self.w <= 0:
            raise ValueError("descriptor extents must be positive")
        if self.kind in ("cross_map", "self_out") and self.cols <= 0:
            raise ValueError(f"{self.kind} descriptor needs a positive cols")


def query_weights(mask: np.ndarray, desc: VariableDescriptor) -> np.ndarray:
    """Per-query mask column (h*w, 1) for an attention-variable descriptor."""
    resized = resize_bilinear(np.asarray(mask, dtype=FLOAT), desc.h, desc.w)
    return np.clip(resized, 0.0, 1.0).reshape(-1, 1)


def fit_to(mask: np.ndarray, desc: VariableDescriptor) -> np.ndarray:
    """Resize a soft mask to a variable's layout (row-major query ordering)."""
    m = np.asarray(mask, dtype=FLOAT)
    if desc.kind == "latent":
        return np.clip(resize_bilinear(m, desc.h, desc.w), 0.0, 1.0)
    col = query_weights(m, desc)
    n_q = desc.h * desc.w
    width = n_q if desc.kind == "self_map" else desc.cols
    return np.broadcast_to(col, (n_q, width)).copy()

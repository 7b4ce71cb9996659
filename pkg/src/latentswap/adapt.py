"""Style and scale adaptation: masked feature statistics, masked AdaIN, and
attention-derived object shapes with the L1 shape energy used for guidance.

Shape extraction has a hard mode (reporting: indicator above the threshold)
and a soft logistic mode whose gradient drives scale guidance; the hard
threshold is flat almost everywhere so only the soft path is differentiated.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .numerics import FLOAT, bilinear_weights, ensure_finite, resize_bilinear

SIGMA_FLOOR = 1e-5

DEFAULT_SHAPE_THRESHOLD = 0.4
DEFAULT_SHAPE_TAU = 0.1


@dataclass(frozen=True)
class ShapeConfig:
    threshold: float = DEFAULT_SHAPE_THRESHOLD
    tau: float = DEFAULT_SHAPE_TAU
    mode: str = "hard"

    def __post_init__(self):
        if not 0.0 < self.threshold < 1.0:
            raise ValueError("threshold must lie in (0, 1)")
        if self.tau <= 0.0:
            raise ValueError("tau must be positive")
        if self.mode not in ("hard", "soft"):
            raise ValueError(f"unknown shape mode {self.mode!r}")


def _flatten_spatial(v: np.ndarray, mask: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Collapse spatial axes to one; returns (positions x channels, weights)."""
    v = np.asarray(v)
    m = np.asarray(mask, dtype=np.float64)
    if v.ndim == 2:  # (N, C) with mask (N,) or (N, 1) or (N, C)
        flat = v.reshape(v.shape[0], v.shape[1])
        w = m.reshape(m.shape[0], -1)[:, 0]
    elif v.ndim == 3:  # (H, W, C) with mask (H, W)
        if m.shape != v.shape[:2]:
            raise ValueError(f"mask {m.shape} does not fit field {v.shape}")
        flat = v.reshape(-1, v.shape[2])
        w = m.reshape(-1)
    else:
        raise ValueError(f"expected rank 2 or 3 variable, got rank {v.ndim}")
    if w.shape[0] != flat.shape[0]:
        raise ValueError("mask length does not match spatial extent")
    return flat.astype(np.float64), w


def masked_stats(v: np.ndarray, mask: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel weighted mean and std over the masked region.

    The std is floored at 1e-5 so flat regions cannot divide by zero.
    Raises on a zero-mass mask.
    """
    flat, w = _flatten_spatial(v, mask)
    total = w.sum()
    if total <= 0.0:
        raise ValueError("mask has zero mass")
    mu = (w[:, None] * flat).sum(axis=0) / total
    var = (w[:, None] * (flat - mu) ** 2).sum(axis=0) / total
    sigma = np.maximum(np.sqrt(var), SIGMA_FLOOR)
    return mu.astype(FLOAT), sigma.astype(FLOAT)


def masked_adain(v_src: np.ndarray, v_concept: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Renormalize v_concept so its masked statistics match v_src's.

    Applied at every position; restricting the result to the foreground is the
    blend's job, not this function's.
    """
    v_src = np.asarray(v_src)
    v_concept = np.asarray(v_concept)
    if v_src.shape != v_concept.shape:
        raise ValueError(f"shape mismatch {v_src.shape} vs {v_concept.shape}")
    mu_s, sig_s = masked_stats(v_src, mask)
    mu_c, sig_c = masked_stats(v_concept, mask)
    out = (v_concept.astype(np.float64) - mu_c) / sig_c * sig_s + mu_s
    return ensure_finite("masked_adain output", out.astype(v_concept.dtype))


class ExtractedShape(NamedTuple):
    field: np.ndarray
    degenerate: bool


def _sigmoid(u: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-np.clip(u, -60.0, 60.0)))


def extract_shape(a: np.ndarray, k: int, h: int, w: int, config: ShapeConfig) -> ExtractedShape:
    """Object footprint of token k in a cross-attention map.

    Column k is reshaped to (h, w) and min-max normalized to [0, 1]; hard mode
    thresholds it, soft mode pushes it through a logistic centered on the
    threshold. A constant column has no footprint: all-zero with the
    degenerate flag set.
    """
    a = np.asarray(a)
    if a.ndim != 2:
        raise ValueError("cross map must be rank 2")
    if not 0 <= k < a.shape[1]:
        raise ValueError(f"token index {k} outside [0, {a.shape[1]})")
    if a.shape[0] != h * w:
        raise ValueError(f"map has {a.shape[0]} queries, grid is {h}x{w}")
    col = a[:, k].astype(np.float64).reshape(h, w)
    lo, hi = col.min(), col.max()
    if hi == lo:
        return ExtractedShape(np.zeros((h, w), dtype=a.dtype), True)
    norm = (col - lo) / (hi - lo)
    if config.mode == "hard":
        field = (norm > config.threshold).astype(a.dtype)
    else:
        field = _sigmoid((norm - config.threshold) / config.tau).astype(a.dtype)
    return ExtractedShape(field, False)


def shape_energy(mask: np.ndarray, shape: np.ndarray) -> float:
    """L1 distance between a fitted mask and an extracted shape."""
    mask = np.asarray(mask)
    shape = np.asarray(shape)
    if mask.shape != shape.shape:
        raise ValueError(f"extent mismatch {mask.shape} vs {shape.shape}")
    return float(np.abs(mask.astype(np.float64) - shape.astype(np.float64)).sum())


def aggregate_shape(cross_maps: Sequence[tuple[np.ndarray, int, int]], k: int,
                    config: ShapeConfig, out_h: int, out_w: int) -> np.ndarray:
    """Average the per-layer shapes of token k at latent resolution.

    cross_maps is a sequence of (map, layer_h, layer_w) triples, one per
    attention layer of a step.
    """
    if not cross_maps:
        raise ValueError("need at least one cross map")
    acc = np.zeros((out_h, out_w), dtype=np.float64)
    for a, h, w in cross_maps:
        field = extract_shape(a, k, h, w, config).field
        acc += resize_bilinear(field.astype(np.float64), out_h, out_w)
    return (acc / len(cross_maps)).astype(FLOAT)


class ShapeEnergy:
    """L1 energy between a latent-resolution mask and the soft aggregate shape.

    value_and_grad consumes the cross maps of one denoiser pass and returns the
    scalar energy with its exact gradient per map, including the min/max terms
    of the normalization, so reverse-mode propagation through the attention
    stack sees the complete derivative.
    """

    def __init__(self, mask: np.ndarray, token_index: int, config: ShapeConfig | None = None):
        self.mask = np.asarray(mask, dtype=np.float64)
        if self.mask.ndim != 2:
            raise ValueError("guidance mask must be rank 2")
        self.token_index = int(token_index)
        cfg = config or ShapeConfig(mode="soft")
        self.config = ShapeConfig(cfg.threshold, cfg.tau, "soft")

    def value_and_grad(self, cross_maps: Sequence[tuple[np.ndarray, int, int]]):
        out_h, out_w = self.mask.shape
        k = self.token_index
        n_layers = len(cross_maps)
        if n_layers == 0:
            raise ValueError("need at least one cross map")

        layers = []
        agg = np.zeros((out_h, out_w), dtype=np.float64)
        for a, h, w in cross_maps:
            a = np.asarray(a, dtype=np.float64)
            if not 0 <= k < a.shape[1]:
                raise ValueError(f"token index {k} outside [0, {a.shape[1]})")
            col = a[:, k].reshape(h, w)
            lo_i = int(col.argmin())
            hi_i = int(col.argmax())
            lo, hi = col.flat[lo_i], col.flat[hi_i]
            if hi == lo:
                layers.append(None)
                continue
            y = (col - lo) / (hi - lo)
            s = _sigmoid((y - self.config.threshold) / self.config.tau)
            wr = bilinear_weights(h, out_h)
            wc = bilinear_weights(w, out_w)
            agg += wr @ s @ wc.T
            layers.append((a.shape, h, w, lo_i, hi_i, hi - lo, y, s, wr, wc))
        agg /= n_layers
        value = float(np.abs(self.mask - agg).sum())

        d_agg = np.sign(agg - self.mask) / n_layers
        grads = []
        for entry in layers:
            if entry is None:
                grads.append(None)
                continue
            a_shape, h, w, lo_i, hi_i, span, y, s, wr, wc = entry
            ds = wr.T @ d_agg @ wc
            dy = ds * s * (1.0 - s) / self.config.tau
            dx = dy / span
            dx.flat[lo_i] += (dy * (y - 1.0)).sum() / span
            dx.flat[hi_i] -= (dy * y).sum() / span
            da = np.zeros(a_shape, dtype=np.float64)
            da[:, k] = dx.reshape(-1)
            grads.append(da)
        return value, grads

"""A small fixed-topology denoising U-Net with recordable, overridable
attention variables and a hand-written reverse-mode path.

Topology (two resolution levels, one attention head everywhere):

    conv_in -> [block0 @ full res] -> avgpool -> conv_down -> [block1 @ half
    res] -> upsample -> conv_up -> +skip -> [block2 @ full res] -> conv_out

Each block is pre-norm self-attention followed by pre-norm cross-attention
with residual adds. Per block the recordable variables are the row-stochastic
self map (N_q x N_q), the cross map (N_q x T_tok) and the self-attention
output (N_q x C). Spatial grids flatten row-major to the query axis.

The backward pass exists for exactly two consumers: gradients of cross-map
energies with respect to the input latent (scale guidance) and gradients of
the prediction with respect to the conditioning rows (null embedding
refinement). It only supports clean forwards, never overridden ones.

All computation follows the dtype of the input latent: float32 for sampling
(recorded variables are then bit-identical to live ones), float64 for
finite-difference-grade gradient checks. Spatial extents must be even.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .adapt import masked_adain
from .errors import NumericError
from .numerics import FLOAT, SeededRng, ensure_finite

ATTENTION_LAYERS = 3
# conv_out is damped so predicted noise stays small relative to the latent;
# this keeps the deterministic inversion round trip tight at 50 steps.
OUTPUT_GAIN = 0.002
LN_EPS = 1e-5

VARIABLE_KINDS = ("self_map", "cross_map", "self_out")


@dataclass(frozen=True)
class DenoiserConfig:
    levels: int = 2
    channels: tuple[int, int] = (16, 32)
    attn_dim: int = 16
    text_dim: int = 16
    temb_dim: int = 32
    in_channels: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.levels != 2:
            raise ValueError("topology is fixed at two resolution levels")
        if len(self.channels) != 2:
            raise ValueError("channels must list one width per level")
        if min(self.channels) <= 0 or self.attn_dim <= 0 or self.text_dim <= 0:
            raise ValueError("dimensions must be positive")
        if self.temb_dim < 4 or self.temb_dim % 2:
            raise ValueError("temb_dim must be even and >= 4")
        if self.in_channels not in (1, 3):
            raise ValueError("in_channels must be 1 or 3")


@dataclass
class ConditioningSet:
    """Prompt-side inputs: token embedding rows plus the unconditional row.

    null_per_step overrides the unconditional row at individual timesteps,
    which is how refined null embeddings are threaded into sampling.
    """

    tokens: np.ndarray
    null: np.ndarray
    null_per_step: dict[int, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=FLOAT)
        self.null = np.asarray(self.null, dtype=FLOAT)
        if self.tokens.ndim != 2 or self.tokens.shape[0] < 1:
            raise ValueError("tokens must be (T, d_text) with at least one row")
        if self.null.shape != (self.tokens.shape[1],):
            raise ValueError("null embedding dimension must match the tokens")

    @property
    def n_tokens(self) -> int:
        return self.tokens.shape[0]

    def null_for_step(self, t: int) -> np.ndarray:
        return self.null_per_step.get(t, self.null)

    def with_rows(self, index: int, rows: np.ndarray) -> "ConditioningSet":
        """Copy with token rows [index, index+len(rows)) replaced."""
        rows = np.atleast_2d(np.asarray(rows, dtype=FLOAT))
        if rows.shape[1] != self.tokens.shape[1]:
            raise ValueError("replacement rows have the wrong embedding width")
        if index < 0 or index + rows.shape[0] > self.n_tokens:
            raise ValueError(
                f"rows [{index}, {index + rows.shape[0]}) fall outside the {self.n_tokens} tokens")
        tokens = self.tokens.copy()
        tokens[index : index + rows.shape[0]] = rows
        return ConditioningSet(tokens, self.null.copy(), dict(self.null_per_step))


@dataclass
class LayerRecord:
    self_map: np.ndarray
    cross_map: np.ndarray
    self_out: np.ndarray


@dataclass
class StepRecord:
    t: int
    z_before: np.ndarray
    layers: list[LayerRecord]


class UNetTrace:
    """Per-step, per-layer record of (self map, cross map, self out) plus the
    latent entering each step."""

    def __init__(self, layer_grids: list[tuple[int, int]]):
        self.layer_grids = layer_grids
        self._steps: dict[int, StepRecord] = {}

    def add(self, rec: StepRecord) -> None:
        self._steps[rec.t] = rec

    def step(self, t: int) -> StepRecord:
        return self._steps[t]

    @property
    def timesteps(self) -> list[int]:
        return sorted(self._steps)

    def __len__(self) -> int:
        return len(self._steps)


@dataclass
class VariableOverride:
    """Replace or mask-blend one recorded variable class at one layer.

    Exactly one of replacement / source must be set. With source, the live
    value v becomes source * (1 - mask) + v * mask; use_adain additionally
    renormalizes the live value to the source's masked statistics first
    (self_out only; attention maps would lose row normalization).
    """

    variable: str
    layer: int | None = None
    replacement: np.ndarray | None = None
    source: np.ndarray | None = None
    mask: np.ndarray | None = None
    use_adain: bool = False

    def __post_init__(self):
        if self.variable not in VARIABLE_KINDS:
            raise ValueError(f"unknown variable class {self.variable!r}")
        if (self.replacement is None) == (self.source is None):
            raise ValueError("set exactly one of replacement or source")
        if self.source is not None and self.mask is None:
            raise ValueError("blend overrides need a mask")
        if self.use_adain and self.variable != "self_out":
            raise ValueError("AdaIN blending applies to self_out only")

    def apply(self, live: np.ndarray) -> np.ndarray:
        if self.replacement is not None:
            if self.replacement.shape != live.shape:
                raise ValueError(
                    f"{self.variable} replacement {self.replacement.shape} != recorded {live.shape}")
            return self.replacement.astype(live.dtype)
        src = self.source
        if src.shape != live.shape:
            raise ValueError(f"{self.variable} source {src.shape} != recorded {live.shape}")
        m = np.asarray(self.mask, dtype=live.dtype)
        src = src.astype(live.dtype)
        if self.use_adain and float(m.sum()) > 0.0:
            live = masked_adain(src, live, np.broadcast_to(m, live.shape)[:, 0])
        return src * (1 - m) + live * m


def _select(overrides, variable: str, layer: int):
    for ov in overrides:
        if ov.variable == variable and (ov.layer is None or ov.layer == layer):
            return ov
    return None


# ---------------------------------------------------------------------------
# primitive ops (forward + input-cotangent backward)

def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _silu(x):
    return x * _sigmoid(x)


def _dsilu(x):
    s = _sigmoid(x)
    return s * (1.0 + x * (1.0 - s))


def _softmax(x):
    e = np.exp(x - x.max(axis=1, keepdims=True))
    return (e / e.sum(axis=1, keepdims=True, dtype=np.float64)).astype(x.dtype)


def _softmax_back(p, dp):
    inner = (dp * p).sum(axis=1, keepdims=True)
    return p * (dp - inner)


def _layernorm(x):
    mu = x.mean(axis=1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    return (x - mu) * inv, inv


def _layernorm_back(dy, y, inv):
    return inv * (dy - dy.mean(axis=1, keepdims=True) - y * (dy * y).mean(axis=1, keepdims=True))


def _conv3x3(x, w):
    xp = np.pad(x, ((1, 1), (1, 1), (0, 0)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (3, 3), axis=(0, 1))
    return np.einsum("ijcab,abco->ijo", win, w, optimize=True)


def _conv3x3_back(dy, w):
    wt = w[::-1, ::-1].transpose(0, 1, 3, 2)
    return _conv3x3(dy, wt)


def _avgpool2(x):
    h, w, c = x.shape
    return x.reshape(h // 2, 2, w // 2, 2, c).mean(axis=(1, 3))


def _avgpool2_back(dy):
    h, w, c = dy.shape
    out = np.empty((h * 2, w * 2, c), dtype=dy.dtype)
    out.reshape(h, 2, w, 2, c)[:] = (dy / 4.0)[:, None, :, None, :]
    return out


def _upsample2(x):
    return np.repeat(np.repeat(x, 2, axis=0), 2, axis=1)


def _upsample2_back(dy):
    h, w, c = dy.shape
    return dy.reshape(h // 2, 2, w // 2, 2, c).sum(axis=(1, 3))


def timestep_embedding(t: int, dim: int, dtype=np.float64) -> np.ndarray:
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / max(half - 1, 1))
    args = float(t) * freqs
    return np.concatenate([np.sin(args), np.cos(args)]).astype(dtype)


# ---------------------------------------------------------------------------
# weights

def _weight_specs(cfg: DenoiserConfig):
    ch0, ch1 = cfg.channels
    d, dt, de = cfg.attn_dim, cfg.text_dim, cfg.temb_dim
    specs = [
        ("conv_in.w", (3, 3, cfg.in_channels, ch0), 9 * cfg.in_channels, 1.0),
        ("temb_in.w", (de, ch0), de, 1.0),
    ]

    def block(name, c):
        return [
            (f"{name}.self_q.w", (c, d), c, 1.0),
            (f"{name}.self_k.w", (c, d), c, 1.0),
            (f"{name}.self_v.w", (c, c), c, 1.0),
            (f"{name}.cross_q.w", (c, d), c, 1.0),
            (f"{name}.cross_k.w", (dt, d), dt, 1.0),
            (f"{name}.cross_v.w", (dt, c), dt, 1.0),
        ]

    specs += block("block0", ch0)
    specs += [
        ("conv_down.w", (3, 3, ch0, ch1), 9 * ch0, 1.0),
        ("temb_down.w", (de, ch1), de, 1.0),
    ]
    specs += block("block1", ch1)
    specs += [
        ("conv_up.w", (3, 3, ch1, ch0), 9 * ch1, 1.0),
        ("temb_up.w", (de, ch0), de, 1.0),
    ]
    specs += block("block2", ch0)
    specs += [("conv_out.w", (3, 3, ch0, cfg.in_channels), 9 * ch0, OUTPUT_GAIN)]
    return specs


def init_weights(config: DenoiserConfig) -> dict[str, np.ndarray]:
    """He-scaled Gaussian weights, drawn in manifest order from the seed."""
    rng = SeededRng(config.seed)
    out = {}
    for name, shape, fan_in, gain in _weight_specs(config):
        std = gain * np.sqrt(2.0 / fan_in)
        out[name] = (rng.normal(shape, dtype=np.float64) * std).astype(FLOAT)
    return out


# ---------------------------------------------------------------------------
# the network

class Denoiser:
    def __init__(self, config: DenoiserConfig | None = None,
                 weights: dict[str, np.ndarray] | None = None):
        self.config = config or DenoiserConfig()
        self.weights = weights if weights is not None else init_weights(self.config)
        expected = {name: shape for name, shape, _, _ in _weight_specs(self.config)}
        if set(self.weights) != set(expected):
            raise ValueError("weight names do not match the configuration")
        for name, shape in expected.items():
            if tuple(self.weights[name].shape) != shape:
                raise ValueError(f"weight {name}: expected shape {shape}, got {self.weights[name].shape}")
        self._w64 = None

    # layer index -> (h, w) spatial grid at that attention layer
    def layer_grids(self, h: int, w: int) -> list[tuple[int, int]]:
        return [(h, w), (h // 2, w // 2), (h, w)]

    def new_trace(self, h: int, w: int) -> UNetTrace:
        return UNetTrace(self.layer_grids(h, w))

    def _wdict(self, dtype):
        if dtype == np.float64:
            if self._w64 is None:
                self._w64 = {k: v.astype(np.float64) for k, v in self.weights.items()}
            return self._w64
        return self.weights

    def _check_input(self, z: np.ndarray):
        if z.ndim != 3 or z.shape[2] != self.config.in_channels:
            raise ValueError(
                f"latent must be (H, W, {self.config.in_channels}), got {z.shape}")
        h, w = z.shape[:2]
        if h < 2 or w < 2 or h % 2 or w % 2:
            raise ValueError(f"spatial extents must be even and >= 2, got {h}x{w}")

    @staticmethod
    def _rows(cond) -> np.ndarray:
        rows = cond.tokens if isinstance(cond, ConditioningSet) else np.asarray(cond)
        rows = np.atleast_2d(rows)
        if rows.ndim != 2:
            raise ValueError("conditioning rows must be (T, d_text)")
        return rows

    def _attention(self, x, wb, prefix, rows, layer, overrides, cache, record):
        """One pre-norm self+cross attention block on an (h, w, c) feature map."""
        h, w, c = x.shape
        n = h * w
        # a Python-float scale keeps float32 inputs on the float32 path
        scale = 1.0 / float(np.sqrt(self.config.attn_dim))
        xf = x.reshape(n, c)

        n1, inv1 = _layernorm(xf)
        q = n1 @ wb[f"{prefix}.self_q.w"]
        k = n1 @ wb[f"{prefix}.self_k.w"]
        v = n1 @ wb[f"{prefix}.self_v.w"]
        m = _softmax((q @ k.T) * scale)
        ov = _select(overrides, "self_map", layer)
        if ov is not None:
            m = ov.apply(m)
        phi = m @ v
        ov = _select(overrides, "self_out", layer)
        if ov is not None:
            phi = ov.apply(phi)
        x1 = xf + phi

        n2, inv2 = _layernorm(x1)
        qc = n2 @ wb[f"{prefix}.cross_q.w"]
        kc = rows @ wb[f"{prefix}.cross_k.w"]
        vc = rows @ wb[f"{prefix}.cross_v.w"]
        a = _softmax((qc @ kc.T) * scale)
        ov = _select(overrides, "cross_map", layer)
        if ov is not None:
            a = ov.apply(a)
        x2 = x1 + a @ vc

        if record is not None:
            record.append(LayerRecord(
                self_map=m.astype(FLOAT), cross_map=a.astype(FLOAT), self_out=phi.astype(FLOAT)))
        if cache is not None:
            cache[prefix] = dict(n1=n1, inv1=inv1, q=q, k=k, v=v, m=m, n2=n2,
                                 inv2=inv2, qc=qc, kc=kc, vc=vc, a=a, hw=(h, w))
        return x2.reshape(h, w, c)

    def _attention_back(self, dx2, wb, prefix, rows, d_cross, cache):
        """Backward through one block; returns (dx, d_rows)."""
        c = cache[prefix]
        scale = 1.0 / float(np.sqrt(self.config.attn_dim))
        h, w = c["hw"]
        dx2 = dx2.reshape(h * w, -1)

        da = dx2 @ c["vc"].T
        if d_cross is not None:
            da = da + d_cross
        dvc = c["a"].T @ dx2
        dlog2 = _softmax_back(c["a"], da)
        dqc = dlog2 @ c["kc"] * scale
        dkc = dlog2.T @ c["qc"] * scale
        d_rows = dkc @ wb[f"{prefix}.cross_k.w"].T + dvc @ wb[f"{prefix}.cross_v.w"].T
        dn2 = dqc @ wb[f"{prefix}.cross_q.w"].T
        dx1 = dx2 + _layernorm_back(dn2, c["n2"], c["inv2"])

        dphi = dx1
        dm = dphi @ c["v"].T
        dv = c["m"].T @ dphi
        dlog = _softmax_back(c["m"], dm)
        dq = dlog @ c["k"] * scale
        dk = dlog.T @ c["q"] * scale
        dn1 = (dq @ wb[f"{prefix}.self_q.w"].T + dk @ wb[f"{prefix}.self_k.w"].T
               + dv @ wb[f"{prefix}.self_v.w"].T)
        dxf = dx1 + _layernorm_back(dn1, c["n1"], c["inv1"])
        return dxf.reshape(h, w, -1), d_rows

    def _forward(self, z, t, rows, overrides=(), record=False, keep=False):
        self._check_input(z)
        if t < 0:
            raise ValueError("timestep must be >= 0")
        if not np.all(np.isfinite(z)):
            raise NumericError("latent contains NaN or Inf")
        dtype = np.float64 if z.dtype == np.float64 else FLOAT
        z = np.ascontiguousarray(z, dtype=dtype)
        wb = self._wdict(dtype)
        rows = np.ascontiguousarray(self._rows(rows), dtype=dtype)
        if rows.shape[1] != self.config.text_dim:
            raise ValueError(
                f"conditioning width {rows.shape[1]} != text_dim {self.config.text_dim}")
        for ov in overrides:
            if ov.layer is not None and not 0 <= ov.layer < ATTENTION_LAYERS:
                raise ValueError(f"layer selector {ov.layer} outside [0, {ATTENTION_LAYERS})")

        temb = timestep_embedding(t, self.config.temb_dim, dtype)
        recs = [] if record else None
        cache = {} if keep else None

        h0 = _conv3x3(z, wb["conv_in.w"]) + temb @ wb["temb_in.w"]
        a0 = _silu(h0)
        b0 = self._attention(a0, wb, "block0", rows, 0, overrides, cache, recs)
        p = _avgpool2(b0)
        h1 = _conv3x3(p, wb["conv_down.w"]) + temb @ wb["temb_down.w"]
        a1 = _silu(h1)
        b1 = self._attention(a1, wb, "block1", rows, 1, overrides, cache, recs)
        u = _upsample2(b1)
        h2 = _conv3x3(u, wb["conv_up.w"]) + temb @ wb["temb_up.w"]
        a2 = _silu(h2)
        c2 = a2 + b0
        b2 = self._attention(c2, wb, "block2", rows, 2, overrides, cache, recs)
        eps = _conv3x3(b2, wb["conv_out.w"])
        ensure_finite("predicted noise", eps)

        if keep:
            cache.update(rows=rows, h0=h0, h1=h1, h2=h2, dtype=dtype)
        rec = None
        if record:
            rec = StepRecord(t=int(t), z_before=z.astype(FLOAT).copy(), layers=recs)
        return eps, rec, cache

    def _backward(self, cache, d_eps, d_cross):
        """Pull cotangents on eps and/or the cross maps back to (dz, d_rows)."""
        wb = self._wdict(cache["dtype"])
        d_cross = d_cross or [None] * ATTENTION_LAYERS
        shape2 = cache["block2"]["n1"].shape
        db2 = (_conv3x3_back(d_eps, wb["conv_out.w"]) if d_eps is not None
               else np.zeros(cache["h2"].shape, dtype=cache["dtype"]))
        dc2, dr2 = self._attention_back(db2, wb, "block2", cache["rows"], d_cross[2], cache)
        dh2 = dc2 * _dsilu(cache["h2"])
        du = _conv3x3_back(dh2, wb["conv_up.w"])
        db1 = _upsample2_back(du)
        dp, dr1 = self._attention_back(db1, wb, "block1", cache["rows"], d_cross[1], cache)
        dh1 = dp * _dsilu(cache["h1"])
        db0 = _avgpool2_back(_conv3x3_back(dh1, wb["conv_down.w"]))
        db0 = db0 + dc2  # skip connection
        da0, dr0 = self._attention_back(db0, wb, "block0", cache["rows"], d_cross[0], cache)
        dh0 = da0 * _dsilu(cache["h0"])
        dz = _conv3x3_back(dh0, wb["conv_in.w"])
        return dz, dr0 + dr1 + dr2

    # ------------------------------------------------------------------ api

    def predict_noise(self, z: np.ndarray, t: int, cond, record: bool = False):
        """Deterministic noise prediction; optionally returns the per-step record."""
        eps, rec, _ = self._forward(z, t, self._rows(cond), record=record)
        return eps, rec

    def predict_noise_with_overrides(self, z: np.ndarray, t: int, cond,
                                     overrides: Sequence[VariableOverride]):
        eps, _, _ = self._forward(z, t, self._rows(cond), overrides=tuple(overrides))
        return eps

    def cross_maps(self, cache) -> list[tuple[np.ndarray, int, int]]:
        grids = []
        for prefix in ("block0", "block1", "block2"):
            c = cache[prefix]
            grids.append((c["a"], c["hw"][0], c["hw"][1]))
        return grids

    def energy_value(self, z: np.ndarray, t: int, cond, energy) -> float:
        """Scalar energy of a clean forward's cross maps (used by gradient checks)."""
        _, _, cache = self._forward(z, t, self._rows(cond), keep=True)
        value, _ = energy.value_and_grad(self.cross_maps(cache))
        return value

    def energy_gradient(self, z: np.ndarray, t: int, cond, energy) -> np.ndarray:
        """d(energy of the cross maps)/dz via the hand-written reverse path.

        energy exposes value_and_grad(maps) -> (scalar, per-layer dA list with
        None for layers the energy ignores). Runs in z's dtype.
        """
        _, _, cache = self._forward(z, t, self._rows(cond), keep=True)
        _, grads = energy.value_and_grad(self.cross_maps(cache))
        if all(g is None for g in grads):
            return np.zeros_like(np.asarray(z))
        grads = [None if g is None else g.astype(cache["dtype"]) for g in grads]
        dz, _ = self._backward(cache, None, grads)
        return dz.astype(np.asarray(z).dtype)

    def embedding_gradient(self, z: np.ndarray, t: int, rows, d_eps: np.ndarray):
        """(eps, d(sum(d_eps * eps))/d rows): the conditioning-side gradient."""
        rows = self._rows(rows)
        eps, _, cache = self._forward(z, t, rows, keep=True)
        _, d_rows = self._backward(cache, d_eps.astype(cache["dtype"]), None)
        return eps, d_rows

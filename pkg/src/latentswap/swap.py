"""Targeted variable swapping across a sampling run.

The flow is: record_source inverts the source latent and replays it with full
variable recording; swap_generate then re-runs sampling under the target
conditioning while, for the first steps_X sampling steps of each variable
class X, blending the live value toward the recorded source value under the
soft mask. Latent and self-attention-output blends optionally renormalize the
live content to the source's masked statistics first (AdaIN); attention maps
always blend plainly so rows keep summing to one. Multi-object swapping folds
single swaps, re-recording from each intermediate image.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .adapt import masked_adain
from .denoiser import ConditioningSet, Denoiser, UNetTrace, VariableOverride
from .errors import ReconstructionError
from .masks import AnnealSchedule, VariableDescriptor, fit_to
from .numerics import FLOAT
from .scheduler import (NoiseSchedule, SamplerConfig, ddim_invert,
                        null_text_optimize, sample)

RECONSTRUCTION_TOL = 1e-3
VARIABLE_CLASSES = ("self_map", "cross_map", "self_out")


@dataclass(frozen=True)
class SwapSchedule:
    """How many sampling steps (from the start, high noise first) each
    variable class is blended for."""

    steps_z: int = 30
    steps_cross_map: int = 20
    steps_self_map: int = 25
    steps_self_out: int = 10

    def __post_init__(self):
        for name, value in self.as_dict().items():
            if value < 0:
                raise ValueError(f"{name} must be >= 0, got {value}")

    def as_dict(self) -> dict[str, int]:
        return {"z": self.steps_z, "cross_map": self.steps_cross_map,
                "self_map": self.steps_self_map, "self_out": self.steps_self_out}

    def check_against(self, n_steps: int) -> None:
        for name, value in self.as_dict().items():
            if value > n_steps:
                raise ValueError(
                    f"swap schedule {name}={value} exceeds the {n_steps}-step run")


@dataclass
class SourceTrace:
    """Everything the swap needs from the source: the reconstruction pass's
    per-step latents (latents[t] for t = 0..T), its full variable trace, and
    the conditioning (with any refined per-step nulls) it ran under."""

    latents: list[np.ndarray]
    trace: UNetTrace
    cond: ConditioningSet
    schedule: NoiseSchedule
    drift: float = 0.0

    @property
    def n_steps(self) -> int:
        return len(self.latents) - 1


@dataclass
class SwapPlan:
    """One swap: where (soft mask at latent extent), what (target conditioning
    with the concept rows swapped in at token_index), and how (schedules)."""

    mask: np.ndarray
    source_cond: ConditioningSet
    target_cond: ConditioningSet
    token_index: int = 0
    schedule: SwapSchedule = field(default_factory=SwapSchedule)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    use_adain: bool = True
    null_iters: int = 0
    null_lr: float = 1e5

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=FLOAT)
        if self.mask.ndim != 2:
            raise ValueError("plan mask must be 2-D at latent extent")
        if self.mask.min() < 0 or self.mask.max() > 1:
            raise ValueError("plan mask values must lie in [0, 1]")
        if self.source_cond.tokens.shape != self.target_cond.tokens.shape:
            raise ValueError("source and target conditioning must have equal token layouts")
        if not 0 <= self.token_index < self.target_cond.n_tokens:
            raise ValueError(f"token index {self.token_index} outside the conditioning set")
        if self.null_iters < 0:
            raise ValueError("null_iters must be >= 0")


def record_source(denoiser: Denoiser, z_0: np.ndarray, cond: ConditioningSet,
                  schedule: NoiseSchedule, sampler: SamplerConfig | None = None,
                  null_iters: int = 0, null_lr: float = 1e5) -> SourceTrace:
    """Invert z_0, optionally refine the null embedding, then replay the
    denoising with full recording. Fails hard if the replay drifts from z_0
    by more than the reconstruction tolerance."""
    sampler = sampler or SamplerConfig()
    trajectory = ddim_invert(denoiser, z_0, cond, schedule)
    run_cond = cond
    if null_iters > 0 and sampler.cfg_scale > 0:
        refined = null_text_optimize(denoiser, trajectory, cond, schedule,
                                     sampler.cfg_scale, iters=null_iters, lr=null_lr)
        run_cond = ConditioningSet(cond.tokens.copy(), cond.null.copy(),
                                   refined.per_step_null)
    replay_config = SamplerConfig(cfg_scale=sampler.cfg_scale, shape_weight=0.0,
                                  anneal_k=sampler.anneal_k)
    z_recon, trace = sample(denoiser, trajectory.z_start, run_cond, schedule,
                            replay_config, record=True)
    drift = float(np.max(np.abs(z_recon.astype(np.float64) - np.asarray(z_0, np.float64))))
    if drift > RECONSTRUCTION_TOL:
        raise ReconstructionError(
            f"reconstruction drifted {drift:.2e} > {RECONSTRUCTION_TOL:.0e} from the source; "
            "increase null-text iterations or lower the guidance scale")
    latents = [z_recon.copy()]
    for t in range(1, schedule.n_steps + 1):
        latents.append(trace.step(t).z_before.copy())
    return SourceTrace(latents=latents, trace=trace, cond=run_cond,
                       schedule=schedule, drift=drift)


def blend_variable(v_src: np.ndarray, v_tgt: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Masked mix keeping the source outside: v_src (1 - m) + v_tgt m."""
    if v_src.shape != v_tgt.shape:
        raise ValueError(f"blend shapes differ: {v_src.shape} vs {v_tgt.shape}")
    m = np.asarray(mask, dtype=v_src.dtype)
    return v_src * (1 - m) + v_tgt * m


def blend_with_adain(v_src: np.ndarray, v_concept: np.ndarray,
                     mask: np.ndarray) -> np.ndarray:
    """Masked mix with the concept content renormalized to the source's
    masked statistics first. Only for value-like variables (latent, self
    output); attention maps would lose row normalization."""
    if v_src.shape != v_concept.shape:
        raise ValueError(f"blend shapes differ: {v_src.shape} vs {v_concept.shape}")
    m = np.asarray(mask, dtype=v_src.dtype)
    weights = np.broadcast_to(m, v_src.shape)[..., 0]
    if float(weights.sum()) == 0.0:
        return v_src.copy()
    adapted = masked_adain(v_src, v_concept, weights)
    return adapted * m + v_src * (1 - m)


class SwapController:
    """Sampling callback that performs the per-step blending against a source
    trace. Keeps per-class counts of the steps it blended at (step_counts) and
    the 1-based step indices themselves (blended_steps)."""

    def __init__(self, trace: SourceTrace, plan: SwapPlan):
        self.trace = trace
        self.plan = plan
        self.n_steps = trace.n_steps
        self.ramp = AnnealSchedule(plan.sampler.anneal_k)
        self.step_counts = {"z": 0, "self_map": 0, "cross_map": 0, "self_out": 0}
        self.blended_steps = {"z": [], "self_map": [], "cross_map": [], "self_out": []}
        self._steps_for = plan.schedule.as_dict()
        n_tokens = plan.target_cond.n_tokens
        first = trace.trace.step(self.n_steps).layers
        self._fitted = {}
        for layer, (h, w) in enumerate(trace.trace.layer_grids):
            channels = first[layer].self_out.shape[1]
            for kind, cols in (("self_map", h * w), ("cross_map", n_tokens),
                               ("self_out", channels)):
                desc = VariableDescriptor(kind, h, w, cols)
                self._fitted[(kind, layer)] = fit_to(plan.mask, desc)

    def _index(self, t: int) -> int:
        return self.n_steps - t + 1  # 1-based step number since sampling began

    def _factor(self, t: int) -> float:
        return self.ramp.ramp(self._index(t) - 1)

    def overrides(self, t: int) -> list[VariableOverride]:
        i = self._index(t)
        factor = FLOAT(self._factor(t))
        out = []
        rec = self.trace.trace.step(t)
        for kind in VARIABLE_CLASSES:
            if i > self._steps_for[kind]:
                continue
            self.step_counts[kind] += 1
            self.blended_steps[kind].append(i)
            for layer, layer_rec in enumerate(rec.layers):
                out.append(VariableOverride(
                    variable=kind, layer=layer,
                    source=getattr(layer_rec, kind),
                    mask=self._fitted[(kind, layer)] * factor,
                    use_adain=kind == "self_out" and self.plan.use_adain))
        return out

    def after_step(self, t: int, z_prev: np.ndarray) -> np.ndarray:
        i = self._index(t)
        if i > self._steps_for["z"]:
            return z_prev
        self.step_counts["z"] += 1
        self.blended_steps["z"].append(i)
        source = self.trace.latents[t - 1]
        m = (self.plan.mask * FLOAT(self._factor(t)))[..., None]
        if self.plan.use_adain:
            return blend_with_adain(source, z_prev, m)
        return blend_variable(source, z_prev, m)


def swap_generate(denoiser: Denoiser, trace: SourceTrace, plan: SwapPlan,
                  controller: SwapController | None = None) -> np.ndarray:
    """Generate the swapped image latent from a recorded source trace."""
    plan.schedule.check_against(trace.n_steps)
    if plan.mask.shape != trace.latents[0].shape[:2]:
        raise ValueError(
            f"mask extent {plan.mask.shape} != latent extent {trace.latents[0].shape[:2]}")
    if not np.any(plan.mask):
        warnings.warn("all-zero swap mask: returning the source reconstruction")
        return trace.latents[0].copy()
    if controller is None:
        controller = SwapController(trace, plan)
    z_final, _ = sample(denoiser, trace.latents[trace.n_steps], plan.target_cond,
                        trace.schedule, plan.sampler, callback=controller,
                        mask=plan.mask)
    return z_final


def multi_swap(denoiser: Denoiser, z_0: np.ndarray, plans: list[SwapPlan],
               schedule: NoiseSchedule) -> np.ndarray:
    """Sequential swaps, re-recording the source from each intermediate
    result. Warns when plan masks overlap (later swaps then disturb earlier
    ones inside the overlap)."""
    for i in range(len(plans)):
        for j in range(i + 1, len(plans)):
            if np.any((plans[i].mask > 0) & (plans[j].mask > 0)):
                warnings.warn(f"swap masks {i} and {j} overlap; regions will interact")
    z_cur = np.asarray(z_0, dtype=FLOAT).copy()
    for plan in plans:
        trace = record_source(denoiser, z_cur, plan.source_cond, schedule,
                              plan.sampler, plan.null_iters, plan.null_lr)
        z_cur = swap_generate(denoiser, trace, plan)
    return z_cur

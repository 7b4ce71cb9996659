"""Deterministic diffusion schedule: DDIM stepping and inversion, guided
noise prediction, null-embedding refinement, and the sampling loop.

Conventions. Timesteps run t = T..1 during sampling; alpha_bar is indexed
t = 0..T with alpha_bar[0] = 1. The inversion moving z_{t-1} -> z_t evaluates
the network at the earlier latent but labels it with the destination timestep
t, which makes the inverse step the exact algebraic inverse of the sampling
step whenever the two noise predictions agree. Guidance follows

    eps = (1 + s) eps(cond) - s eps(null) + v sigma_t d(energy)/dz

with the energy gradient taken on the conditional branch after the
classifier-free combination, and sigma_t = sqrt(1 - alpha_bar_t).

The sampling loop accepts a callback object with any of three optional hooks:
overrides(t) supplies attention-variable overrides for the conditional
forward, modify_eps(t, z, eps) post-processes the combined prediction, and
after_step(t, z) may replace the latent after the update (latent blending).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .adapt import ShapeConfig, ShapeEnergy
from .denoiser import ConditioningSet, Denoiser, StepRecord, UNetTrace
from .errors import NumericError
from .numerics import FLOAT

DEFAULT_STEPS = 50
DEFAULT_BETA_START = 1e-4
DEFAULT_BETA_END = 2e-2
DEFAULT_ANNEAL_K = 30


@dataclass(frozen=True)
class NoiseSchedule:
    """Linear-beta schedule; alpha_bars has T+1 entries with alpha_bars[0]=1."""

    betas: np.ndarray
    alpha_bars: np.ndarray

    @property
    def n_steps(self) -> int:
        return len(self.betas)

    def alpha_bar(self, t: int) -> float:
        if not 0 <= t <= self.n_steps:
            raise ValueError(f"timestep {t} outside [0, {self.n_steps}]")
        return float(self.alpha_bars[t])

    def sigma(self, t: int) -> float:
        return float(np.sqrt(1.0 - self.alpha_bar(t)))


def make_schedule(n_steps: int = DEFAULT_STEPS, beta_start: float = DEFAULT_BETA_START,
                  beta_end: float = DEFAULT_BETA_END) -> NoiseSchedule:
    """n_steps=0 is the degenerate empty schedule (inversion returns its input)."""
    if n_steps < 0:
        raise ValueError("step count must be >= 0")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got [{beta_start}, {beta_end}]")
    betas = np.linspace(beta_start, beta_end, n_steps, dtype=np.float64)
    alpha_bars = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
    return NoiseSchedule(betas=betas, alpha_bars=alpha_bars)


@dataclass
class SamplerConfig:
    cfg_scale: float = 0.0
    shape_weight: float = 0.0
    token_index: int = 0
    shape: ShapeConfig = field(default_factory=ShapeConfig)
    anneal_k: int = DEFAULT_ANNEAL_K

    def __post_init__(self):
        if self.cfg_scale < 0 or self.shape_weight < 0:
            raise ValueError("guidance strengths must be nonnegative")
        if self.token_index < 0:
            raise ValueError("token index must be nonnegative")
        if self.anneal_k < 0:
            raise ValueError("anneal constant must be nonnegative")


def ddim_step(z_t: np.ndarray, eps_hat: np.ndarray, t: int,
              schedule: NoiseSchedule) -> np.ndarray:
    """One deterministic denoising update z_t -> z_{t-1}."""
    if not 1 <= t <= schedule.n_steps:
        raise ValueError(f"timestep {t} outside [1, {schedule.n_steps}]")
    ab_t = schedule.alpha_bar(t)
    ab_prev = schedule.alpha_bar(t - 1)
    z64 = np.asarray(z_t, dtype=np.float64)
    e64 = np.asarray(eps_hat, dtype=np.float64)
    x0 = (z64 - np.sqrt(1.0 - ab_t) * e64) / np.sqrt(ab_t)
    z_prev = np.sqrt(ab_prev) * x0 + np.sqrt(1.0 - ab_prev) * e64
    return z_prev.astype(np.asarray(z_t).dtype)


def ddim_invert_step(z_prev: np.ndarray, eps_hat: np.ndarray, t: int,
                     schedule: NoiseSchedule) -> np.ndarray:
    """Algebraic inverse of ddim_step for the same eps_hat: z_{t-1} -> z_t."""
    if not 1 <= t <= schedule.n_steps:
        raise ValueError(f"timestep {t} outside [1, {schedule.n_steps}]")
    ab_t = schedule.alpha_bar(t)
    ab_prev = schedule.alpha_bar(t - 1)
    z64 = np.asarray(z_prev, dtype=np.float64)
    e64 = np.asarray(eps_hat, dtype=np.float64)
    z_t = (np.sqrt(ab_t / ab_prev) * (z64 - np.sqrt(1.0 - ab_prev) * e64)
           + np.sqrt(1.0 - ab_t) * e64)
    return z_t.astype(np.asarray(z_prev).dtype)


def eps_coefficient(schedule: NoiseSchedule, t: int) -> float:
    """d(z_{t-1})/d(eps_hat) in ddim_step; negative for every valid t."""
    ab_t = schedule.alpha_bar(t)
    ab_prev = schedule.alpha_bar(t - 1)
    return float(np.sqrt(1.0 - ab_prev) - np.sqrt(ab_prev * (1.0 - ab_t) / ab_t))


@dataclass
class Trajectory:
    """Per-step latents from an inversion: latents[t] for t = 0..T."""

    latents: list[np.ndarray]
    trace: UNetTrace | None = None

    @property
    def z_start(self) -> np.ndarray:
        return self.latents[-1]

    def __len__(self) -> int:
        return len(self.latents)


def ddim_invert(denoiser: Denoiser, z_0: np.ndarray, cond: ConditioningSet,
                schedule: NoiseSchedule, record: bool = False) -> Trajectory:
    """Run the update in reverse from z_0 to z_T under the conditional branch."""
    z = np.asarray(z_0, dtype=FLOAT)
    trace = denoiser.new_trace(z.shape[0], z.shape[1]) if record else None
    latents = [z.copy()]
    for t in range(1, schedule.n_steps + 1):
        eps, rec = denoiser.predict_noise(z, t, cond, record=record)
        z = ddim_invert_step(z, eps, t, schedule)
        latents.append(z.copy())
        if record:
            trace.add(rec)
    return Trajectory(latents=latents, trace=trace)


def cfg_eps(denoiser: Denoiser, z: np.ndarray, t: int, cond: ConditioningSet,
            s: float) -> np.ndarray:
    """Classifier-free combination (1+s) eps(cond) - s eps(null)."""
    if s < 0:
        raise ValueError("guidance strength must be nonnegative")
    eps_c, _ = denoiser.predict_noise(z, t, cond)
    if s == 0.0:
        return eps_c
    eps_n, _ = denoiser.predict_noise(z, t, cond.null_for_step(t)[None, :])
    return (1.0 + s) * eps_c - s * eps_n


def guided_eps(denoiser: Denoiser, z: np.ndarray, t: int, cond: ConditioningSet,
               schedule: NoiseSchedule, config: SamplerConfig,
               mask: np.ndarray | None = None) -> np.ndarray:
    """cfg_eps plus the shape-guidance term v sigma_t d(energy)/dz.

    The energy is the L1 distance between the mask and the soft shape of the
    guided token's cross-attention. mask is the soft mask at latent extent.
    """
    eps = cfg_eps(denoiser, z, t, cond, config.cfg_scale)
    if config.shape_weight == 0.0 or mask is None:
        return eps
    energy = ShapeEnergy(mask, config.token_index, config.shape)
    grad = denoiser.energy_gradient(z, t, cond, energy)
    if not np.any(grad):
        return eps
    return eps + FLOAT(config.shape_weight * schedule.sigma(t)) * grad.astype(eps.dtype)


@dataclass
class NullTextResult:
    """Refined per-step null embeddings plus the objective history."""

    per_step_null: dict[int, np.ndarray]
    objectives: dict[int, list[float]]
    z_final: np.ndarray


def null_text_optimize(denoiser: Denoiser, trajectory: Trajectory,
                       cond: ConditioningSet, schedule: NoiseSchedule, s: float,
                       iters: int = 10, lr: float = 1e5) -> NullTextResult:
    """Refine the null embedding step by step so guided sampling retraces the
    inversion trajectory.

    Walks t = T..1 keeping a running latent. At each step the null row is
    gradient-descended on || ddim_step(z, cfg_eps, t) - z_{t-1}^traj ||^2; an
    update that increases the objective is reverted and the step size halved,
    so the recorded objective never increases.

    The default step size is large because the damped output layer makes
    embedding gradients tiny; revert-on-increase keeps oversized steps safe.
    """
    if iters < 0:
        raise ValueError("iteration count must be >= 0")
    n_steps = schedule.n_steps
    if len(trajectory) != n_steps + 1:
        raise ValueError(f"trajectory has {len(trajectory)} latents, schedule wants {n_steps + 1}")
    per_step: dict[int, np.ndarray] = {}
    history: dict[int, list[float]] = {}
    z_run = trajectory.latents[n_steps].copy()

    for t in range(n_steps, 0, -1):
        target = trajectory.latents[t - 1]
        eps_c, _ = denoiser.predict_noise(z_run, t, cond)
        null = cond.null_for_step(t).copy()
        coeff = eps_coefficient(schedule, t)

        def evaluate(row):
            eps_n, _ = denoiser.predict_noise(z_run, t, row[None, :])
            combined = (1.0 + s) * eps_c - s * eps_n
            resid = (ddim_step(z_run, combined, t, schedule) - target).astype(np.float64)
            return float((resid * resid).sum()), eps_n

        current, eps_n = evaluate(null)
        steps = [current]
        step_size = lr
        for _ in range(iters):
            if s == 0.0:
                steps.append(current)
                continue  # the null branch has zero weight: gradient vanishes
            combined = (1.0 + s) * eps_c - s * eps_n
            z_prev = ddim_step(z_run, combined, t, schedule)
            d_eps_null = (-s * 2.0 * coeff) * (z_prev - target).astype(FLOAT)
            _, d_rows = denoiser.embedding_gradient(z_run, t, null[None, :], d_eps_null)
            candidate = (null - step_size * d_rows[0]).astype(FLOAT)
            value, eps_cand = evaluate(candidate)
            if value > current:
                step_size *= 0.5
            else:
                null, current, eps_n = candidate, value, eps_cand
            steps.append(current)

        per_step[t] = null
        history[t] = steps
        combined = (1.0 + s) * eps_c - s * eps_n
        z_run = ddim_step(z_run, combined, t, schedule).astype(FLOAT)

    return NullTextResult(per_step_null=per_step, objectives=history, z_final=z_run)


def sample(denoiser: Denoiser, z_start: np.ndarray, cond: ConditioningSet,
           schedule: NoiseSchedule, config: SamplerConfig | None = None,
           callback=None, mask: np.ndarray | None = None, record: bool = False):
    """Deterministic sampling t = T..1; returns (z_0, trace or None).

    The callback hooks fire in order: overrides(t) before the conditional
    forward, modify_eps(t, z_t, eps) after guidance, after_step(t, z_{t-1})
    after the update. Recording requires override-free steps.
    """
    config = config or SamplerConfig()
    z = np.asarray(z_start, dtype=FLOAT)
    if not np.all(np.isfinite(z)):
        raise NumericError("sampling started from a non-finite latent")
    trace = denoiser.new_trace(z.shape[0], z.shape[1]) if record else None
    hook_overrides = getattr(callback, "overrides", None)
    hook_eps = getattr(callback, "modify_eps", None)
    hook_step = getattr(callback, "after_step", None)

    for t in range(schedule.n_steps, 0, -1):
        overrides = tuple(hook_overrides(t)) if hook_overrides else ()
        if overrides:
            if record:
                raise ValueError("cannot record a trace while overriding variables")
            eps = denoiser.predict_noise_with_overrides(z, t, cond, overrides)
        else:
            eps, rec = denoiser.predict_noise(z, t, cond, record=record)
            if record:
                trace.add(rec)
        s = config.cfg_scale
        if s > 0.0:
            eps_n, _ = denoiser.predict_noise(z, t, cond.null_for_step(t)[None, :])
            eps = (1.0 + s) * eps - s * eps_n
        if config.shape_weight > 0.0 and mask is not None:
            energy = ShapeEnergy(mask, config.token_index, config.shape)
            grad = denoiser.energy_gradient(z, t, cond, energy)
            if np.any(grad):
                eps = eps + FLOAT(config.shape_weight * schedule.sigma(t)) * grad.astype(eps.dtype)
        if hook_eps:
            eps = hook_eps(t, z, eps)
        z_prev = ddim_step(z, eps, t, schedule)
        if hook_step:
            z_prev = hook_step(t, z_prev)
        z = np.asarray(z_prev, dtype=FLOAT)

    return z, trace

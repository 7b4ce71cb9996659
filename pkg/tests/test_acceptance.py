"""Acceptance checks: one test per numbered guarantee, each printing a single
pass/fail line with the measured values next to its tolerance.

 1. A hard-masked swap with latent blending on every step leaves the region
    outside the mask untouched, in the latent and in the decoded image.
 2. An all-zero mask reproduces the reconstruction byte for byte; swapping a
    concept for itself changes at most one pixel.
 3. Inversion followed by sampling returns to the start latent; null-text
    refinement monotonically reduces its objectives and the final error.
 4. The energy gradient matches central finite differences, and shape
    guidance always pushes the latent downhill.
 5. Masked appearance adaptation matches source statistics, fixes its own
    output, and leaves already-adapted values alone.
 6. Mask utilities agree with brute-force reimplementations.
 7. The default swap schedule blends each variable class for exactly its
    configured number of steps.
 8. Two sequential swaps with disjoint masks preserve everything outside the
    union of the masks.
 9. Every CLI command is byte-reproducible for a fixed seed and handles a
    non-square input.
"""

import subprocess
import sys
import time
import warnings

import numpy as np

from latentswap.adapt import ShapeConfig, ShapeEnergy, masked_adain, masked_stats
from latentswap.denoiser import Denoiser, DenoiserConfig
from latentswap.masks import (
    AnnealSchedule,
    VariableDescriptor,
    anneal,
    dilate,
    feather,
    fit_to,
    DEFAULT_DILATE_EXTENT,
)
from latentswap.numerics import FLOAT, SeededRng
from latentswap.pgm import write_pgm
from latentswap.pipeline import decode, encode, make_conditioning
from latentswap.scheduler import (
    SamplerConfig,
    cfg_eps,
    ddim_invert,
    ddim_step,
    make_schedule,
    null_text_optimize,
    sample,
)
from latentswap.swap import (
    SwapController,
    SwapPlan,
    SwapSchedule,
    multi_swap,
    record_source,
    swap_generate,
)
from latentswap.tensorio import save_concept


def _report(n: int, ok: bool, detail: str) -> None:
    line = f"[criterion {n}] {'PASS' if ok else 'FAIL'} - {detail}"
    print(line)
    assert ok, line


_CACHE: dict = {}


def engine() -> Denoiser:
    if "engine" not in _CACHE:
        _CACHE["engine"] = Denoiser(DenoiserConfig(seed=0))
    return _CACHE["engine"]


def conditioning():
    if "cond" not in _CACHE:
        _CACHE["cond"] = make_conditioning(0, 4, 16)
    return _CACHE["cond"]


def schedule50():
    if "T50" not in _CACHE:
        _CACHE["T50"] = make_schedule(50)
    return _CACHE["T50"]


def source32():
    """Recorded 32x32 source shared by the first two checks; also remembers
    how long the recording pass took."""
    if "src32" not in _CACHE:
        img = np.random.Generator(np.random.PCG64(7)).integers(
            0, 256, size=(32, 32), dtype=np.uint8)
        started = time.perf_counter()
        trace = record_source(engine(), encode(img), conditioning(), schedule50())
        _CACHE["src32"] = (img, trace, time.perf_counter() - started)
    return _CACHE["src32"]


def full_z_schedule(n_steps: int) -> SwapSchedule:
    return SwapSchedule(steps_z=n_steps, steps_cross_map=20,
                        steps_self_map=25, steps_self_out=10)


def hard_mask_32() -> np.ndarray:
    mask = np.zeros((32, 32), dtype=FLOAT)
    mask[8:20, 10:24] = 1.0
    return mask


def test_criterion_1_hard_masked_swap_preserves_background():
    _, trace, record_seconds = source32()
    mask = hard_mask_32()
    concept = conditioning().with_rows(1, SeededRng(55).normal((1, 16)))
    plan = SwapPlan(mask, conditioning(), concept, token_index=1,
                    schedule=full_z_schedule(50), sampler=SamplerConfig(anneal_k=0))
    started = time.perf_counter()
    z_swap = swap_generate(engine(), trace, plan)
    elapsed = record_seconds + (time.perf_counter() - started)

    recon = trace.latents[0]
    outside = mask == 0.0
    latent_diff = float(np.abs((z_swap.astype(np.float64)
                                - recon.astype(np.float64))[outside]).max())
    grown = dilate((mask > 0).astype(np.uint8), DEFAULT_DILATE_EXTENT) > 0
    pixel_diffs = int(np.count_nonzero((decode(z_swap) != decode(recon)) & ~grown))
    ok = latent_diff <= 1e-5 and pixel_diffs == 0 and elapsed <= 30.0
    _report(1, ok, f"outside-mask latent max {latent_diff:.2e} (tol 1e-5), "
                   f"{pixel_diffs} pixels differ outside the dilated mask (tol 0), "
                   f"{elapsed:.1f}s (limit 30s)")


def test_criterion_2_degenerate_edits_are_no_ops():
    _, trace, _ = source32()
    recon_img = decode(trace.latents[0])
    concept = conditioning().with_rows(1, SeededRng(55).normal((1, 16)))

    started = time.perf_counter()
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        zero_plan = SwapPlan(np.zeros((32, 32)), conditioning(), concept,
                             token_index=1, schedule=full_z_schedule(50),
                             sampler=SamplerConfig(anneal_k=0))
        z_zero = swap_generate(engine(), trace, zero_plan)
    zero_seconds = time.perf_counter() - started
    zero_identical = bool(np.array_equal(decode(z_zero), recon_img))

    identity = conditioning().with_rows(1, conditioning().tokens[1:2].copy())
    started = time.perf_counter()
    ident_plan = SwapPlan(hard_mask_32(), conditioning(), identity, token_index=1,
                          schedule=full_z_schedule(50), sampler=SamplerConfig(anneal_k=0))
    z_ident = swap_generate(engine(), trace, ident_plan)
    ident_seconds = time.perf_counter() - started
    ident_pixels = int(np.count_nonzero(decode(z_ident) != recon_img))

    ok = (zero_identical and ident_pixels <= 1
          and zero_seconds <= 30.0 and ident_seconds <= 30.0)
    _report(2, ok, f"zero-mask byte-identical: {zero_identical}, identity concept "
                   f"changed {ident_pixels} pixels (tol 1), "
                   f"{zero_seconds:.1f}s/{ident_seconds:.1f}s (limit 30s each)")


def test_criterion_3_inversion_round_trip_and_null_text_refinement():
    worst = 0.0
    for seed in range(10):
        z_0 = SeededRng(5000 + seed).normal((32, 32, 1))
        trajectory = ddim_invert(engine(), z_0, conditioning(), schedule50())
        z_back, _ = sample(engine(), trajectory.z_start, conditioning(),
                           schedule50(), SamplerConfig())
        worst = max(worst, float(np.abs(z_back.astype(np.float64)
                                        - z_0.astype(np.float64)).max()))

    schedule = make_schedule(20)
    monotone = True
    improved = 0
    for seed in range(10):
        z_0 = SeededRng(3000 + seed).normal((12, 12, 1))
        trajectory = ddim_invert(engine(), z_0, conditioning(), schedule)
        plain, _ = sample(engine(), trajectory.z_start, conditioning(), schedule,
                          SamplerConfig(cfg_scale=1.5))
        result = null_text_optimize(engine(), trajectory, conditioning(),
                                    schedule, 1.5, iters=10)
        for history in result.objectives.values():
            monotone &= all(b <= a for a, b in zip(history, history[1:]))
        error_plain = float(np.linalg.norm((plain - z_0).astype(np.float64)))
        error_refined = float(np.linalg.norm((result.z_final - z_0).astype(np.float64)))
        improved += error_refined < error_plain

    ok = worst <= 1e-3 and monotone and improved >= 9
    _report(3, ok, f"round-trip max error {worst:.2e} over 10 seeds (tol 1e-3), "
                   f"null-text objectives monotone: {monotone}, total error "
                   f"strictly reduced on {improved}/10 seeds (need 9)")


def test_criterion_4_energy_gradient_and_guidance_direction():
    schedule = make_schedule(20)
    rng = np.random.Generator(np.random.PCG64(4000))
    worst_rel = 0.0
    for case in range(20):
        z = SeededRng(400 + case).normal((8, 8, 1)).astype(np.float64)
        t = int(rng.integers(1, 21))
        mask = (rng.random((8, 8)) > 0.6).astype(np.float64)
        mask[4, 4] = 1.0
        energy = ShapeEnergy(mask, case % 4, ShapeConfig(mode="soft", tau=0.15))
        grad = engine().energy_gradient(z, t, conditioning(), energy).astype(np.float64)
        fd = np.zeros_like(grad)
        step = 1e-5
        for index in np.ndindex(z.shape):
            z_plus = z.copy()
            z_plus[index] += step
            z_minus = z.copy()
            z_minus[index] -= step
            fd[index] = (engine().energy_value(z_plus, t, conditioning(), energy)
                         - engine().energy_value(z_minus, t, conditioning(), energy)) / (2 * step)
        worst_rel = max(worst_rel, float(np.linalg.norm(fd - grad)
                                         / np.linalg.norm(fd)))

    mask = np.zeros((12, 12))
    mask[3:9, 2:7] = 1.0
    config = SamplerConfig(cfg_scale=0.5, shape_weight=0.7, token_index=1,
                           shape=ShapeConfig(mode="soft", tau=0.15))
    z_0 = SeededRng(3100).normal((12, 12, 1))
    z = ddim_invert(engine(), z_0, conditioning(), schedule).z_start.copy()
    descent_steps = 0
    all_negative = True
    for t in range(schedule.n_steps, 0, -1):
        eps_plain = cfg_eps(engine(), z, t, conditioning(), config.cfg_scale)
        energy = ShapeEnergy(mask, config.token_index, config.shape)
        grad = engine().energy_gradient(z, t, conditioning(), energy)
        if np.any(grad):
            descent_steps += 1
            eps_guided = eps_plain + FLOAT(config.shape_weight * schedule.sigma(t)) \
                * grad.astype(eps_plain.dtype)
            delta = (ddim_step(z, eps_guided, t, schedule)
                     - ddim_step(z, eps_plain, t, schedule)).astype(np.float64)
            all_negative &= float((delta * grad.astype(np.float64)).sum()) < 0.0
            z = ddim_step(z, eps_guided, t, schedule)
        else:
            z = ddim_step(z, eps_plain, t, schedule)

    ok = worst_rel <= 1e-3 and descent_steps > 0 and all_negative
    _report(4, ok, f"gradient vs central differences worst rel L2 {worst_rel:.2e} "
                   f"over 20 cases (tol 1e-3), guidance moved downhill on all "
                   f"{descent_steps} steps with a nonzero gradient: {all_negative}")


def test_criterion_5_masked_appearance_adaptation():
    rng = np.random.Generator(np.random.PCG64(500))
    worst_mu = 0.0
    worst_sigma = 0.0
    worst_fixed = 0.0
    worst_idem = 0.0
    for trial in range(8):
        shape = (12, 10, 3) if trial % 2 == 0 else (40, 2)
        v_src = (rng.standard_normal(shape) * rng.uniform(0.5, 3)
                 + rng.uniform(-2, 2)).astype(FLOAT)
        v_concept = (rng.standard_normal(shape) * rng.uniform(0.5, 3)
                     + rng.uniform(-2, 2)).astype(FLOAT)
        mask_shape = shape[:2] if len(shape) == 3 else shape[:1]
        mask = rng.random(mask_shape).astype(FLOAT)
        if trial % 3 == 0:
            mask = (mask > 0.5).astype(FLOAT)
        mask.flat[0] = 1.0

        adapted = masked_adain(v_src, v_concept, mask)
        mu_src, sigma_src = masked_stats(v_src, mask)
        mu_out, sigma_out = masked_stats(adapted, mask)
        worst_mu = max(worst_mu, float(np.abs(mu_out - mu_src).max()))
        worst_sigma = max(worst_sigma, float(np.abs(sigma_out - sigma_src).max()))
        worst_fixed = max(worst_fixed, float(np.abs(
            masked_adain(v_src, v_src, mask) - v_src).max()))
        worst_idem = max(worst_idem, float(np.abs(
            masked_adain(v_src, adapted, mask) - adapted).max()))

    ok = worst_mu <= 1e-5 and worst_sigma <= 1e-4 and worst_fixed <= 1e-5 \
        and worst_idem <= 1e-5
    _report(5, ok, f"per-channel mean off by {worst_mu:.2e} (tol 1e-5), std by "
                   f"{worst_sigma:.2e} (tol 1e-4); fixed point {worst_fixed:.2e}, "
                   f"idempotence {worst_idem:.2e} (tol 1e-5)")


# --- brute-force references for criterion 6 ---------------------------------

def oracle_dilate(mask: np.ndarray, extent: int) -> np.ndarray:
    r = extent // 2
    h, w = mask.shape
    out = np.zeros((h, w), dtype=int)
    for i in range(h):
        for j in range(w):
            for di in range(-r, r + 1):
                for dj in range(-r, r + 1):
                    if di * di + dj * dj > (r + 0.5) ** 2:
                        continue
                    if 0 <= i + di < h and 0 <= j + dj < w and mask[i + di, j + dj]:
                        out[i, j] = 1
    return out


def oracle_blur_replicate(field: np.ndarray, sigma: float, radius: int) -> np.ndarray:
    size = 2 * radius + 1
    kernel = np.zeros((size, size))
    for u in range(size):
        for v in range(size):
            kernel[u, v] = np.exp(-((u - radius) ** 2 + (v - radius) ** 2)
                                  / (2.0 * sigma * sigma))
    kernel /= kernel.sum()
    h, w = field.shape
    out = np.zeros((h, w))
    for i in range(h):
        for j in range(w):
            total = 0.0
            for u in range(size):
                for v in range(size):
                    ii = min(max(i + u - radius, 0), h - 1)
                    jj = min(max(j + v - radius, 0), w - 1)
                    total += field[ii, jj] * kernel[u, v]
            out[i, j] = total
    return out


def oracle_resize(field: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    h, w = field.shape
    out = np.zeros((out_h, out_w))
    for i in range(out_h):
        y = (h - 1) / 2.0 if out_h == 1 else i * (h - 1) / (out_h - 1)
        y0 = min(int(np.floor(y)), h - 2) if h > 1 else 0
        fy = y - y0
        for j in range(out_w):
            x = (w - 1) / 2.0 if out_w == 1 else j * (w - 1) / (out_w - 1)
            x0 = min(int(np.floor(x)), w - 2) if w > 1 else 0
            fx = x - x0
            tl = field[y0, x0]
            tr = field[y0, min(x0 + 1, w - 1)]
            bl = field[min(y0 + 1, h - 1), x0]
            br = field[min(y0 + 1, h - 1), min(x0 + 1, w - 1)]
            out[i, j] = (tl * (1 - fy) * (1 - fx) + tr * (1 - fy) * fx
                         + bl * fy * (1 - fx) + br * fy * fx)
    return out


def test_criterion_6_mask_utilities_match_brute_force():
    rng = np.random.Generator(np.random.PCG64(600))
    sizes = [9, 13, 17, 21, 25, 29, 33]
    dilate_exact = True
    foreground_exact = True
    worst_feather = 0.0
    worst_anneal = 0.0
    worst_fit = 0.0
    for trial in range(10):
        h = int(rng.choice(sizes))
        w = int(rng.choice(sizes))
        mask = (rng.random((h, w)) > rng.uniform(0.55, 0.9)).astype(np.uint8)
        mask[h // 2, w // 2] = 1
        extent = int(rng.choice([3, 5, 7]))

        grown = dilate(mask, extent)
        dilate_exact &= bool(np.array_equal(grown.astype(int),
                                            oracle_dilate(mask, extent)))

        sigma = float(rng.uniform(1.0, 3.0))
        radius = int(rng.integers(2, 5))
        soft = feather(mask, extent=extent, sigma=sigma, radius=radius)
        reference = np.clip(np.where(
            mask == 1, 1.0,
            oracle_blur_replicate(oracle_dilate(mask, extent).astype(float),
                                  sigma, radius)), 0.0, 1.0)
        worst_feather = max(worst_feather, float(np.abs(soft - reference).max()))
        foreground_exact &= bool(np.all(soft[mask == 1] == 1.0))

        field = soft
        for k_anneal in (0, 3, 7):
            schedule = AnnealSchedule(k_anneal)
            for t_step in range(0, k_anneal + 3):
                expected = field * (1.0 if k_anneal == 0
                                    else min(t_step / k_anneal, 1.0))
                worst_anneal = max(worst_anneal, float(np.abs(
                    anneal(field, t_step, schedule) - expected).max()))

        descriptors = [
            VariableDescriptor("latent", 6, 10),
            VariableDescriptor("cross_map", 4, 5, cols=4),
            VariableDescriptor("self_map", 4, 5),
            VariableDescriptor("self_out", 4, 5, cols=16),
        ]
        for desc in descriptors:
            fitted = fit_to(field, desc)
            resized = np.clip(oracle_resize(field.astype(float), desc.h, desc.w), 0, 1)
            if desc.kind == "latent":
                expected = resized
            else:
                width = desc.h * desc.w if desc.kind == "self_map" else desc.cols
                expected = np.repeat(resized.reshape(-1, 1), width, axis=1)
            worst_fit = max(worst_fit, float(np.abs(fitted - expected).max()))

    ok = (dilate_exact and foreground_exact and worst_feather <= 1e-6
          and worst_anneal <= 1e-6 and worst_fit <= 1e-6)
    _report(6, ok, f"dilation exact: {dilate_exact}, feather off by "
                   f"{worst_feather:.2e}, foreground pinned to 1: {foreground_exact}, "
                   f"anneal off by {worst_anneal:.2e}, fit_to off by "
                   f"{worst_fit:.2e} (tol 1e-6)")


def test_criterion_7_default_schedule_step_counts():
    img = np.random.Generator(np.random.PCG64(9)).integers(
        0, 256, size=(8, 8), dtype=np.uint8)
    trace = record_source(engine(), encode(img), conditioning(), schedule50())
    mask = np.zeros((8, 8), dtype=FLOAT)
    mask[2:6, 2:6] = 1.0
    concept = conditioning().with_rows(1, SeededRng(62).normal((1, 16)))
    plan = SwapPlan(mask, conditioning(), concept, token_index=1)
    controller = SwapController(trace, plan)
    swap_generate(engine(), trace, plan, controller=controller)

    counts = dict(controller.step_counts)
    expected = {"z": 30, "cross_map": 20, "self_map": 25, "self_out": 10}
    prefixes = all(controller.blended_steps[kind] == list(range(1, n + 1))
                   for kind, n in expected.items())
    ok = counts == expected and prefixes
    _report(7, ok, f"blended step counts {counts} (want {expected}), each over "
                   f"the leading steps of the run: {prefixes}")


def test_criterion_8_disjoint_swaps_compose():
    img = np.random.Generator(np.random.PCG64(8)).integers(
        0, 256, size=(16, 16), dtype=np.uint8)
    z_0 = encode(img)
    recon = record_source(engine(), z_0, conditioning(), schedule50()).latents[0]

    mask_a = np.zeros((16, 16), dtype=FLOAT)
    mask_a[2:7, 2:7] = 1.0
    mask_b = np.zeros((16, 16), dtype=FLOAT)
    mask_b[9:14, 8:14] = 1.0
    schedule = full_z_schedule(50)
    plans = [
        SwapPlan(mask_a, conditioning(),
                 conditioning().with_rows(1, SeededRng(60).normal((1, 16))),
                 token_index=1, schedule=schedule, sampler=SamplerConfig(anneal_k=0)),
        SwapPlan(mask_b, conditioning(),
                 conditioning().with_rows(2, SeededRng(61).normal((1, 16))),
                 token_index=2, schedule=schedule, sampler=SamplerConfig(anneal_k=0)),
    ]
    z_out = multi_swap(engine(), z_0, plans, schedule50())

    outside = ~((mask_a > 0) | (mask_b > 0))
    latent_diff = float(np.abs((z_out.astype(np.float64)
                                - recon.astype(np.float64))[outside]).max())
    pixel_diff = int(np.abs(decode(z_out).astype(int)
                            - decode(recon).astype(int))[outside].max())
    ok = latent_diff <= 1e-4 and pixel_diff <= 1
    _report(8, ok, f"outside-union latent max {latent_diff:.2e} (tol 1e-4), "
                   f"worst pixel delta {pixel_diff} (tol 1)")


def test_criterion_9_cli_byte_reproducible_on_non_square_input(tmp_path):
    rng = np.random.Generator(np.random.PCG64(90))
    write_pgm(tmp_path / "image.pgm", rng.integers(0, 256, size=(32, 48),
                                                   dtype=np.uint8))
    mask = np.zeros((32, 48), dtype=np.uint8)
    mask[6:16, 8:20] = 255
    write_pgm(tmp_path / "mask.pgm", mask)
    mask_b = np.zeros((32, 48), dtype=np.uint8)
    mask_b[20:28, 28:44] = 255
    write_pgm(tmp_path / "mask_b.pgm", mask_b)
    save_concept(tmp_path / "concept.lswp", 1, SeededRng(91).normal((1, 16)))
    save_concept(tmp_path / "concept_b.lswp", 2, SeededRng(92).normal((1, 16)))

    common = ["--steps", "12", "--swap-z", "12", "--swap-cross", "8",
              "--swap-self", "10", "--swap-out", "4", "--anneal-k", "6",
              "--seed", "3", "--image", str(tmp_path / "image.pgm")]
    commands = {
        "invert": ["invert", *common, "--output", str(tmp_path / "noise.lswp")],
        "swap": ["swap", *common, "--mask", str(tmp_path / "mask.pgm"),
                 "--concept", str(tmp_path / "concept.lswp"),
                 "--output", str(tmp_path / "swapped.pgm")],
        "insert": ["insert", *common, "--shape-weight", "0.5", "--token-index", "1",
                   "--mask", str(tmp_path / "mask.pgm"),
                   "--concept", str(tmp_path / "concept.lswp"),
                   "--output", str(tmp_path / "inserted.pgm")],
        "multi-swap": ["multi-swap", *common, "--plan-count", "2",
                       "--mask-1", str(tmp_path / "mask.pgm"),
                       "--concept-1", str(tmp_path / "concept.lswp"),
                       "--mask-2", str(tmp_path / "mask_b.pgm"),
                       "--concept-2", str(tmp_path / "concept_b.lswp"),
                       "--output", str(tmp_path / "multi.pgm")],
        "trace-dump": ["trace-dump", *common, "--out-dir", str(tmp_path / "dump")],
    }

    failures = []
    for name, args in commands.items():
        outputs = []
        for _ in range(2):
            result = subprocess.run([sys.executable, "-m", "latentswap", *args],
                                    capture_output=True, text=True, timeout=300)
            if result.returncode != 0:
                failures.append(f"{name} exited {result.returncode}: "
                                f"{result.stderr.strip()}")
                break
            written = sorted(line.removeprefix("wrote ")
                             for line in result.stdout.splitlines()
                             if line.startswith("wrote "))
            outputs.append({path: open(path, "rb").read() for path in written})
        if len(outputs) == 2:
            if not outputs[0]:
                failures.append(f"{name} wrote nothing")
            elif outputs[0] != outputs[1]:
                failures.append(f"{name} not byte-reproducible")

    ok = not failures
    _report(9, ok, "all five commands reran byte-identically on a 32x48 input"
            if ok else "; ".join(failures))

"""End-to-end surface: pixel codec, run configuration, deterministic
conditioning, and the command bodies behind the CLI (invert, swap, insert,
multi-swap, trace-dump).

Diffusion runs directly in normalized pixel space: encode maps 8-bit channels
affinely onto [-1, 1] and decode inverts it with half-away rounding, so the
codec round-trips every 8-bit image exactly and background-preservation
claims are checkable at the byte level.

Configuration is flat key=value text; CLI overrides win over the file. Every
command writes a run manifest (sorted key=value lines, no timestamps) that
reproduces the run byte-identically. All file writes go through a
write-temp-then-rename step.
"""

from __future__ import annotations

import os
import re
from contextlib import contextmanager

import numpy as np

from .adapt import ShapeConfig, aggregate_shape
from .denoiser import ConditioningSet, Denoiser, DenoiserConfig
from .errors import ConfigError, LatentSwapError
from .masks import feather, load_binary_mask
from .numerics import FLOAT, SeededRng
from .pgm import read_pgm, read_ppm, write_pgm, write_ppm
from .scheduler import SamplerConfig, ddim_invert, make_schedule, sample
from .swap import (SwapPlan, SwapSchedule, multi_swap, record_source,
                   swap_generate)
from .tensorio import load_concept, load_weights, save_tensor

# conditioning token rows come from a stream distinct from the weight stream
TOKEN_SEED_OFFSET = 1
PC_ITERATIONS = 50
PC_TOLERANCE = 1e-8

COMMANDS = ("invert", "swap", "insert", "multi-swap", "trace-dump")

_CONFIG_SPEC: dict[str, tuple[str, object]] = {
    "steps": ("int", 50),
    "beta-start": ("float", 1e-4),
    "beta-end": ("float", 0.02),
    "cfg-scale": ("float", 0.0),
    "shape-weight": ("float", 0.0),
    "null-iters": ("int", 0),
    "null-lr": ("float", 1e5),
    "shape-threshold": ("float", 0.4),
    "shape-tau": ("float", 0.1),
    "adain": ("bool", True),
    "swap-z": ("int", 30),
    "swap-cross": ("int", 20),
    "swap-self": ("int", 25),
    "swap-out": ("int", 10),
    "anneal-k": ("int", 30),
    "feather": ("bool", True),
    "feather-extent": ("int", 5),
    "feather-sigma": ("float", 2.0),
    "feather-radius": ("int", 4),
    "seed": ("int", 0),
    "tokens": ("int", 4),
    "token-index": ("int", 0),
    "plan-count": ("int", 0),
    "image": ("str", None),
    "mask": ("str", None),
    "concept": ("str", None),
    "weights": ("str", None),
    "output": ("str", None),
    "out-dir": ("str", None),
}
# numbered per-plan inputs for multi-swap: mask-1, concept-1, mask-2, ...
_PLAN_KEY = re.compile(r"^(mask|concept)-[1-9][0-9]*$")

_BOOL_WORDS = {"on": True, "true": True, "yes": True, "1": True,
               "off": False, "false": False, "no": False, "0": False}


# ---------------------------------------------------------------------------
# codec

def encode(image: np.ndarray) -> np.ndarray:
    """8-bit image -> float32 latent in [-1, 1], shape (H, W, C)."""
    img = np.asarray(image)
    if img.dtype != np.uint8:
        raise ConfigError(f"images must be 8-bit, got dtype {img.dtype}")
    if img.ndim == 2:
        img = img[:, :, None]
    if img.ndim != 3 or img.shape[2] not in (1, 3):
        raise ConfigError(f"images must be HxW or HxWx3, got shape {image.shape}")
    return (-1.0 + img.astype(np.float64) * (2.0 / 255.0)).astype(FLOAT)


def decode(z: np.ndarray) -> np.ndarray:
    """Inverse of encode: clamp to [0, 255], round half away from zero."""
    z = np.asarray(z)
    if not np.all(np.isfinite(z)):
        raise ConfigError("cannot decode a non-finite latent")
    u = np.clip((z.astype(np.float64) + 1.0) * 127.5, 0.0, 255.0)
    img = np.floor(u + 0.5).astype(np.uint8)
    if img.ndim == 3 and img.shape[2] == 1:
        return img[:, :, 0]
    return img


def read_image(path) -> np.ndarray:
    try:
        with open(path, "rb") as f:
            magic = f.read(2)
    except OSError as e:
        raise ConfigError(f"cannot read image {path}: {e}") from e
    if magic == b"P5":
        return read_pgm(path)
    if magic == b"P6":
        return read_ppm(path)
    raise ConfigError(f"{path}: not a binary PGM (P5) or PPM (P6) file")


# ---------------------------------------------------------------------------
# configuration

def _parse_value(key: str, kind: str, text: str):
    try:
        if kind == "int":
            return int(text)
        if kind == "float":
            return float(text)
        if kind == "bool":
            try:
                return _BOOL_WORDS[text.strip().lower()]
            except KeyError:
                raise ValueError(f"expected on/off, got {text!r}") from None
        return text
    except ValueError as e:
        raise ConfigError(f"config key {key}: {e}") from e


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "on" if value else "off"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def read_config_file(path) -> dict[str, str]:
    """Flat key=value lines; blank lines and # comments ignored."""
    try:
        with open(path, "r", encoding="utf-8") as f:
            lines = f.readlines()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    out = {}
    for lineno, line in enumerate(lines, start=1):
        text = line.strip()
        if not text or text.startswith("#"):
            continue
        if "=" not in text:
            raise ConfigError(f"{path}:{lineno}: expected key=value, got {text!r}")
        key, value = text.split("=", 1)
        out[key.strip()] = value.strip()
    return out


class PipelineConfig:
    """Typed view over the flat key=value space with defaults applied."""

    def __init__(self, raw: dict[str, str] | None = None):
        self.values = {key: default for key, (_, default) in _CONFIG_SPEC.items()}
        for key, text in (raw or {}).items():
            if key in _CONFIG_SPEC:
                self.values[key] = _parse_value(key, _CONFIG_SPEC[key][0], text)
            elif _PLAN_KEY.match(key):
                self.values[key] = text
            else:
                raise ConfigError(f"unknown config key {key!r}")

    @classmethod
    def load(cls, path=None, overrides: dict[str, str] | None = None) -> "PipelineConfig":
        raw = read_config_file(path) if path else {}
        raw.update(overrides or {})
        return cls(raw)

    def __getitem__(self, key: str):
        return self.values[key]

    def get(self, key: str, default=None):
        return self.values.get(key, default)

    def require(self, *keys: str) -> None:
        missing = [k for k in keys if not self.values.get(k)]
        if missing:
            raise ConfigError(f"missing required config keys: {', '.join(missing)}")

    def manifest_items(self) -> dict[str, str]:
        return {k: _format_value(v) for k, v in self.values.items() if v is not None}


# ---------------------------------------------------------------------------
# file plumbing

def _atomic(path, writer) -> None:
    tmp = f"{path}.tmp"
    try:
        writer(tmp)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.remove(tmp)
        raise


def write_image(path, img: np.ndarray) -> None:
    if img.ndim == 2:
        _atomic(path, lambda p: write_pgm(p, img))
    else:
        _atomic(path, lambda p: write_ppm(p, img))


def write_manifest(path, items: dict[str, str]) -> None:
    text = "".join(f"{k}={v}\n" for k, v in sorted(items.items()))
    _atomic(path, lambda p: open(p, "w", encoding="utf-8").write(text))


@contextmanager
def _stage(name: str):
    """Tag errors with the pipeline stage they came from."""
    try:
        yield
    except LatentSwapError as e:
        raise type(e)(f"[{name}] {e}") from e
    except ValueError as e:
        raise ConfigError(f"[{name}] {e}") from e


# ---------------------------------------------------------------------------
# shared setup

def make_conditioning(seed: int, n_tokens: int, text_dim: int) -> ConditioningSet:
    """Deterministic conditioning rows for a run seed; null starts at zero."""
    if n_tokens < 1:
        raise ConfigError("tokens must be >= 1")
    rng = SeededRng(seed + TOKEN_SEED_OFFSET)
    tokens = rng.normal((n_tokens, text_dim))
    return ConditioningSet(tokens, np.zeros(text_dim, dtype=FLOAT))


def _build_engine(config: PipelineConfig, z_0: np.ndarray):
    dconf = DenoiserConfig(in_channels=z_0.shape[2], seed=config["seed"])
    weights = None
    if config.get("weights"):
        with _stage("load-weights"):
            weights = load_weights(config["weights"])
    denoiser = Denoiser(dconf, weights)
    schedule = make_schedule(config["steps"], config["beta-start"], config["beta-end"])
    cond = make_conditioning(config["seed"], config["tokens"], dconf.text_dim)
    return denoiser, schedule, cond


def _load_source(config: PipelineConfig):
    with _stage("encode"):
        img = read_image(config["image"])
        z_0 = encode(img)
        if z_0.shape[0] % 2 or z_0.shape[1] % 2:
            raise ConfigError(f"image extents must be even, got {z_0.shape[:2]}")
    denoiser, schedule, cond = _build_engine(config, z_0)
    return img, z_0, denoiser, schedule, cond


def _sampler_config(config: PipelineConfig, token_index: int) -> SamplerConfig:
    shape = ShapeConfig(threshold=config["shape-threshold"], tau=config["shape-tau"])
    return SamplerConfig(cfg_scale=config["cfg-scale"],
                         shape_weight=config["shape-weight"],
                         token_index=token_index, shape=shape,
                         anneal_k=config["anneal-k"])


def _prepare_mask(config: PipelineConfig, path, extent: tuple[int, int]) -> np.ndarray:
    with _stage("mask"):
        mask = load_binary_mask(path)
        if mask.shape != extent:
            raise ConfigError(f"mask {path} extent {mask.shape} != image extent {extent}")
        if config["feather"]:
            return feather(mask, config["feather-extent"], config["feather-sigma"],
                           config["feather-radius"])
        return mask


def _build_plan(config: PipelineConfig, cond: ConditioningSet, mask_path,
                concept_path, extent: tuple[int, int]) -> SwapPlan:
    with _stage("concept"):
        token_index, rows = load_concept(concept_path)
        target = cond.with_rows(token_index, rows)
    mask = _prepare_mask(config, mask_path, extent)
    schedule = SwapSchedule(steps_z=config["swap-z"], steps_cross_map=config["swap-cross"],
                            steps_self_map=config["swap-self"], steps_self_out=config["swap-out"])
    return SwapPlan(mask=mask, source_cond=cond, target_cond=target,
                    token_index=token_index, schedule=schedule,
                    sampler=_sampler_config(config, token_index),
                    use_adain=config["adain"], null_iters=config["null-iters"],
                    null_lr=config["null-lr"])


# ---------------------------------------------------------------------------
# principal component (trace inspection)

def first_principal_component(rows: np.ndarray, iters: int = PC_ITERATIONS,
                              tol: float = PC_TOLERANCE) -> np.ndarray | None:
    """Dominant right singular direction of mean-centered rows via power
    iteration; None for a constant (zero-variance) stack. The sign is fixed
    by making the largest-magnitude entry positive."""
    x = np.asarray(rows, dtype=np.float64)
    centered = x - x.mean(axis=0, keepdims=True)
    row_norms = np.einsum("ij,ij->i", centered, centered)
    # Centering a constant stack leaves rounding residue, so the degenerate
    # test must be relative to the data scale rather than an exact zero.
    scale = float(np.abs(x).max())
    floor = np.finfo(np.float64).eps * max(scale, 1.0) ** 2 * x.shape[1]
    if row_norms.max() <= floor:
        return None
    v = centered[int(np.argmax(row_norms))].copy()
    v /= np.linalg.norm(v)
    for _ in range(iters):
        w = centered.T @ (centered @ v)
        norm = np.linalg.norm(w)
        if norm == 0.0:
            return None
        w /= norm
        done = np.linalg.norm(w - v) <= tol
        v = w
        if done:
            break
    peak = int(np.argmax(np.abs(v)))
    if v[peak] < 0:
        v = -v
    return v


def _to_gray(field: np.ndarray) -> np.ndarray:
    """Min-max map of a real field onto 8-bit gray; flat fields to mid-gray."""
    lo, hi = float(field.min()), float(field.max())
    if hi == lo:
        return np.full(field.shape, 128, dtype=np.uint8)
    scaled = (field.astype(np.float64) - lo) / (hi - lo) * 255.0
    return np.floor(scaled + 0.5).astype(np.uint8)


# ---------------------------------------------------------------------------
# commands

def run_invert(config: PipelineConfig) -> list[str]:
    """Invert the image to its starting noise; report the round-trip error."""
    config.require("image", "output")
    _, z_0, denoiser, schedule, cond = _load_source(config)
    with _stage("invert"):
        trajectory = ddim_invert(denoiser, z_0, cond, schedule)
        z_recon, _ = sample(denoiser, trajectory.z_start, cond, schedule, SamplerConfig())
        error = float(np.max(np.abs(z_recon.astype(np.float64) - z_0.astype(np.float64))))
    out = config["output"]
    _atomic(out, lambda p: save_tensor(p, trajectory.z_start))
    items = config.manifest_items()
    items.update({"command": "invert", "recon-max-abs-error": f"{error:.6e}"})
    write_manifest(f"{out}.manifest", items)
    return [out, f"{out}.manifest"]


def _run_single_swap(config: PipelineConfig, command: str) -> list[str]:
    config.require("image", "mask", "concept", "output")
    _, z_0, denoiser, schedule, cond = _load_source(config)
    plan = _build_plan(config, cond, config["mask"], config["concept"], z_0.shape[:2])
    with _stage("record"):
        trace = record_source(denoiser, z_0, cond, schedule, plan.sampler,
                              plan.null_iters, plan.null_lr)
    with _stage("swap"):
        z_out = swap_generate(denoiser, trace, plan)
    out = config["output"]
    write_image(out, decode(z_out))
    items = config.manifest_items()
    items.update({"command": command, "recon-drift": f"{trace.drift:.6e}"})
    write_manifest(f"{out}.manifest", items)
    return [out, f"{out}.manifest"]


def run_swap(config: PipelineConfig) -> list[str]:
    return _run_single_swap(config, "swap")


def run_insert(config: PipelineConfig) -> list[str]:
    # same machinery as swapping: an insertion is a swap into a background region
    return _run_single_swap(config, "insert")


def run_multi_swap(config: PipelineConfig) -> list[str]:
    config.require("image", "output")
    img, z_0, denoiser, schedule, cond = _load_source(config)
    count = config["plan-count"]
    if count < 0:
        raise ConfigError("plan-count must be >= 0")
    plans = []
    for i in range(1, count + 1):
        mask_key, concept_key = f"mask-{i}", f"concept-{i}"
        if not config.get(mask_key) or not config.get(concept_key):
            raise ConfigError(f"plan {i} needs both {mask_key} and {concept_key}")
        plans.append(_build_plan(config, cond, config[mask_key],
                                 config[concept_key], z_0.shape[:2]))
    with _stage("multi-swap"):
        z_out = multi_swap(denoiser, z_0, plans, schedule) if plans else z_0
    out = config["output"]
    write_image(out, decode(z_out) if plans else img.copy())
    items = config.manifest_items()
    items.update({"command": "multi-swap"})
    write_manifest(f"{out}.manifest", items)
    return [out, f"{out}.manifest"]


def run_trace_dump(config: PipelineConfig) -> list[str]:
    """Inspection dumps from a reconstruction trace: the latent trajectory's
    first principal component, per-token/per-layer attention heatmaps, and
    hard shape masks at the configured threshold."""
    config.require("image", "out-dir")
    _, z_0, denoiser, schedule, cond = _load_source(config)
    sampler = _sampler_config(config, config["token-index"])
    with _stage("record"):
        trace = record_source(denoiser, z_0, cond, schedule, sampler,
                              config["null-iters"], config["null-lr"])
    out_dir = config["out-dir"]
    os.makedirs(out_dir, exist_ok=True)
    written = []

    rows = np.stack([lat.ravel() for lat in trace.latents])
    component = first_principal_component(rows)
    if component is None:
        pc_img = np.full(z_0.shape[:2], 128, dtype=np.uint8)
    else:
        field = component.reshape(z_0.shape).mean(axis=2)
        pc_img = _to_gray(field)
    path = os.path.join(out_dir, "latent_pc.pgm")
    write_image(path, pc_img)
    written.append(path)

    n_steps = schedule.n_steps
    grids = trace.trace.layer_grids
    averaged = []
    for layer in range(len(grids)):
        acc = np.zeros(trace.trace.step(1).layers[layer].cross_map.shape, dtype=np.float64)
        for t in range(1, n_steps + 1):
            acc += trace.trace.step(t).layers[layer].cross_map
        averaged.append((acc / n_steps).astype(FLOAT))

    n_tokens = cond.n_tokens
    for k in range(n_tokens):
        for layer, (h, w) in enumerate(grids):
            heat = averaged[layer][:, k].reshape(h, w)
            path = os.path.join(out_dir, f"heat_token{k}_layer{layer}.pgm")
            write_image(path, _to_gray(heat))
            written.append(path)

    shape_config = ShapeConfig(threshold=config["shape-threshold"],
                               tau=config["shape-tau"], mode="hard")
    maps = [(averaged[layer], h, w) for layer, (h, w) in enumerate(grids)]
    for k in range(n_tokens):
        field = aggregate_shape(maps, k, shape_config, z_0.shape[0], z_0.shape[1])
        hard = np.where(field >= 0.5, 255, 0).astype(np.uint8)
        path = os.path.join(out_dir, f"shape_token{k}.pgm")
        write_image(path, hard)
        written.append(path)

    items = config.manifest_items()
    items.update({"command": "trace-dump", "recon-drift": f"{trace.drift:.6e}",
                  "files": ",".join(os.path.basename(p) for p in written)})
    manifest = os.path.join(out_dir, "manifest.txt")
    write_manifest(manifest, items)
    written.append(manifest)
    return written


RUNNERS = {"invert": run_invert, "swap": run_swap, "insert": run_insert,
           "multi-swap": run_multi_swap, "trace-dump": run_trace_dump}

"""Look inside a recorded run: attention heat maps and latent structure.

Recording a reconstruction keeps every self map, cross map, and attention
output at every step. This script averages the cross maps over time to show
where each token attends, extracts soft object shapes from them, and projects
the latent trajectory onto its first principal component.
"""

from pathlib import Path

import numpy as np

from latentswap import (Denoiser, DenoiserConfig, ShapeConfig, aggregate_shape,
                        encode, first_principal_component, make_conditioning,
                        make_schedule, record_source)
from latentswap.pgm import write_pgm, write_pgm16

OUT = Path(__file__).resolve().parent / "output" / "06_trace_inspection"
SIZE = 16
STEPS = 16
N_TOKENS = 4


def paint_scene(size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size]
    img = 50.0 + 100.0 * xx / (size - 1)
    img[(yy - size * 0.3) ** 2 + (xx - size * 0.3) ** 2 <= (size * 0.16) ** 2] = 240.0
    img[int(size * 0.6):int(size * 0.9), int(size * 0.55):int(size * 0.9)] = 15.0
    return img.astype(np.uint8)


def main() -> None:
    OUT.mkdir(parents=True, exist_ok=True)
    print(f"== trace inspection, {SIZE}x{SIZE}, {STEPS} steps, {N_TOKENS} tokens ==")

    img = paint_scene(SIZE)
    write_pgm(OUT / "source.pgm", img)
    engine = Denoiser(DenoiserConfig(seed=0))
    cond = make_conditioning(seed=0, n_tokens=N_TOKENS, text_dim=16)
    schedule = make_schedule(STEPS)
    trace = record_source(engine, encode(img), cond, schedule)
    record = trace.trace
    grids = record.layer_grids
    print(f"recorded {STEPS} steps x {len(grids)} attention layers, "
          f"grids {grids}")

    print("\nstep-averaged cross attention per token (middle layer):")
    layer = 1
    h, w = grids[layer]
    for k in range(N_TOKENS):
        acc = np.zeros((h, w))
        for t in range(1, STEPS + 1):
            acc += record.step(t).layers[layer].cross_map[:, k].reshape(h, w)
        acc /= STEPS
        peak = tuple(int(v) for v in np.unravel_index(int(np.argmax(acc)), acc.shape))
        print(f"  token {k}: mass {acc.sum():6.3f}, peak at {peak}, "
              f"spread {float(acc.std()):.4f}")
        write_pgm16(OUT / f"heat_token{k}.pgm",
                    (acc - acc.min()) / max(float(acc.max() - acc.min()), 1e-12))

    print("\nsoft shapes aggregated over all layers at the final step:")
    shape_cfg = ShapeConfig(mode="soft", tau=0.1)
    maps = [(record.step(1).layers[i].cross_map, gh, gw)
            for i, (gh, gw) in enumerate(grids)]
    for k in range(N_TOKENS):
        field = aggregate_shape(maps, k, shape_cfg, SIZE, SIZE)
        covered = int(np.count_nonzero(field >= 0.5))
        print(f"  token {k}: {covered} pixels above 0.5")
        write_pgm16(OUT / f"shape_token{k}.pgm", np.clip(field, 0.0, 1.0))

    print("\nprincipal component of the latent trajectory:")
    stack = np.stack([z.reshape(-1) for z in trace.latents])
    component = first_principal_component(stack)
    if component is None:
        print("  trajectory has no variance (unexpected)")
    else:
        field = component.reshape(SIZE, SIZE, -1).mean(axis=2)
        spread = (field - field.min()) / max(float(field.max() - field.min()), 1e-12)
        write_pgm16(OUT / "latent_pc.pgm", spread)
        projections = (stack - stack.mean(axis=0)) @ component
        print(f"  projection range over time: [{projections.min():+.3f}, "
              f"{projections.max():+.3f}]")
        print("  (the sweep from noise back to the image dominates the variance)")

    print(f"\nartifacts in {OUT}")
    print("the CLI equivalent: latentswap trace-dump --image <pgm> --out-dir <dir>")


if __name__ == "__main__":
    main()

"""Drive a swap from words instead of raw embedding rows.

The engine conditions on token rows, not text, so a "text" interface is just
a deterministic vocabulary: each word hashes to a seed, the seed generates an
embedding row. A phrase becomes a block of rows, saved to a concept file and
spliced into the conditioning at swap time. The same file works on the
command line via `latentswap swap --concept <file>`.
"""

import zlib
from pathlib import Path

import numpy as np

from latentswap import (Denoiser, DenoiserConfig, SamplerConfig, SeededRng,
                        SwapPlan, SwapSchedule, decode, encode, load_concept,
                        make_conditioning, make_schedule, record_source,
                        save_concept, swap_generate)
from latentswap.pgm import write_pgm

OUT = Path(__file__).resolve().parent / "output" / "05_text_based_swap"
SIZE = 20
STEPS = 20
TEXT_DIM = 16
PHRASE = "weathered copper"
TOKEN_INDEX = 1


def embed_word(word: str) -> np.ndarray:
    """One deterministic embedding row per word (crc32 of the word as seed)."""
    return SeededRng(zlib.crc32(word.encode("utf-8"))).normal((TEXT_DIM,))


def embed_phrase(phrase: str) -> np.ndarray:
    return np.stack([embed_word(w) for w in phrase.split()])


def paint_scene(size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size]
    img = 70.0 + 110.0 * yy / (size - 1)
    img[(np.abs(yy - size * 0.45) < size * 0.18)
        & (np.abs(xx - size * 0.5) < size * 0.22)] = 205.0
    return img.astype(np.uint8)


def main() -> None:
    OUT.mkdir(parents=True, exist_ok=True)
    print(f"== text-driven swap: {PHRASE!r} into a {SIZE}x{SIZE} scene ==")

    rows = embed_phrase(PHRASE)
    print(f"phrase embeds to {rows.shape[0]} rows of width {rows.shape[1]}")
    concept_path = OUT / "concept.lswp"
    save_concept(concept_path, TOKEN_INDEX, rows)
    index, loaded = load_concept(concept_path)
    print(f"concept file round trip: index {index}, "
          f"rows identical {bool(np.array_equal(rows, loaded))}")

    img = paint_scene(SIZE)
    z_0 = encode(img)
    write_pgm(OUT / "source.pgm", img)

    engine = Denoiser(DenoiserConfig(seed=0))
    cond = make_conditioning(seed=0, n_tokens=4, text_dim=TEXT_DIM)
    schedule = make_schedule(STEPS)
    trace = record_source(engine, z_0, cond, schedule)

    mask = np.zeros((SIZE, SIZE), dtype=np.float32)
    mask[int(SIZE * 0.27):int(SIZE * 0.63), int(SIZE * 0.28):int(SIZE * 0.72)] = 1.0
    target = cond.with_rows(index, loaded)
    plan = SwapPlan(mask, cond, target, token_index=index,
                    schedule=SwapSchedule(steps_z=STEPS, steps_cross_map=10,
                                          steps_self_map=12, steps_self_out=5),
                    sampler=SamplerConfig(anneal_k=5))
    z_out = swap_generate(engine, trace, plan)
    write_pgm(OUT / "swapped.pgm", decode(z_out))

    recon = trace.latents[0]
    delta = np.abs(z_out.astype(np.float64) - recon.astype(np.float64))[..., 0]
    print(f"\nlatent change inside the mask:  {delta[mask == 1.0].max():.2e}")
    print(f"latent change outside the mask: {delta[mask == 0.0].max():.2e}")

    config_path = OUT / "equivalent.cfg"
    config_path.write_text(
        f"steps={STEPS}\nswap-z={STEPS}\nswap-cross=10\nswap-self=12\n"
        f"swap-out=5\nanneal-k=5\nfeather=off\nconcept={concept_path}\n")
    print(f"\nthe same edit from the CLI would use {config_path}:")
    for line in config_path.read_text().splitlines():
        print(f"  {line}")
    print(f"\nartifacts in {OUT}")


if __name__ == "__main__":
    main()

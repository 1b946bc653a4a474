"""Regenerate the committed degradation test vectors in tests/golden/.

Run from the repo root: python3 scripts/make_golden.py
Only rerun when a transform is changed on purpose; the tests assert byte equality.
"""
import json
from pathlib import Path

import numpy as np

from streamhl.core import Prng
from streamhl.degrade import (Raster, blackout, block_noise, color_banding, quality_degradation,
                              write_ppm)

OUT = Path(__file__).resolve().parent.parent / "tests" / "golden"
W, H = 96, 80  # not multiples of the 32-px block, so edge crops are exercised
SEED = 2024


def golden_input() -> Raster:
    """Smooth gradients plus PRNG texture, deterministic from SEED."""
    rng = Prng(SEED)
    y, x = np.mgrid[0:H, 0:W]
    base = np.stack([x * 255 / (W - 1), y * 255 / (H - 1), (x + y) % 64 * 4], axis=-1)
    tex = np.array([rng.randint(41) for _ in range(W * H * 3)]).reshape(H, W, 3) - 20
    return Raster.from_array(np.clip(base + tex, 0, 255).astype(np.uint8))


def cases(frame: Raster) -> dict[str, Raster]:
    return {
        "color_banding": color_banding(frame, 64),
        "blackout": blackout(frame),
        "block_noise": block_noise(frame, Prng(SEED + 1)),
        "block_noise_p05": block_noise(frame, Prng(SEED + 1), p=0.5),
        "quality": quality_degradation(frame),
    }


def main():
    OUT.mkdir(parents=True, exist_ok=True)
    frame = golden_input()
    write_ppm(OUT / "input.ppm", frame)
    for name, r in cases(frame).items():
        write_ppm(OUT / f"{name}.ppm", r)
    meta = {"seed": SEED, "width": W, "height": H,
            "block_noise_seed": SEED + 1, "cases": sorted(cases(frame))}
    (OUT / "meta.json").write_text(json.dumps(meta, indent=2) + "\n")


if __name__ == "__main__":
    main()

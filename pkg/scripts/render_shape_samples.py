#!/usr/bin/env python3
"""Render a contact sheet of synthetic scenes, one row per class, as a PGM.

Usage: python scripts/render_shape_samples.py [out.pgm] [--seed N] [--cols K]
"""

import argparse
import sys
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from hmpcnn import datagen


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("out", nargs="?", default="shape_samples.pgm")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--cols", type=int, default=10)
    ap.add_argument("--noise", type=float, default=0.05)
    args = ap.parse_args()

    side = datagen.IMAGE_SIDE
    pad = 2
    sheet = np.ones((2 * (side + pad) + pad, args.cols * (side + pad) + pad))
    for label in (0, 1):
        col = 0
        item = 0
        while col < args.cols:
            rng_label = int(datagen._item_rng(args.seed, item, 0).integers(0, 2))
            if rng_label == label:
                scene = datagen.sample_scene(label, datagen._item_rng(args.seed, item, 1))
                img = datagen.add_noise(datagen.rasterize(scene), args.noise,
                                        datagen._item_rng(args.seed, item, 2))
                r = pad + label * (side + pad)
                c = pad + col * (side + pad)
                sheet[r:r + side, c:c + side] = img
                col += 1
            item += 1
    data = (sheet * 255).astype(np.uint8)
    h, w = data.shape
    Path(args.out).write_bytes(f"P5\n{w} {h}\n255\n".encode() + data.tobytes())
    print(f"wrote {args.out} ({w}x{h}); top row class 0, bottom row class 1")


if __name__ == "__main__":
    main()

#!/usr/bin/env python3
"""Generate a paired synthetic corpus on disk: two embedding files + manifest.

The test split is written with graded input corruption so downstream
calibration runs have an uncertainty signal to find.

Usage:
    python3 scripts/make_synthetic_pairs.py --out-dir data/ --n 440 --dim 16
"""
import argparse
import pathlib
import sys

import numpy as np

sys.path.insert(0, str(pathlib.Path(__file__).resolve().parents[1] / "src"))

from grove.dataio import write_embeddings
from grove.synthetic import corrupt, make_pairs


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out-dir", required=True)
    ap.add_argument("--n", type=int, default=440)
    ap.add_argument("--dim", type=int, default=16)
    ap.add_argument("--latent-dim", type=int, default=2)
    ap.add_argument("--train-frac", type=float, default=10 / 11)
    ap.add_argument("--levels", type=float, nargs="*", default=[0.5, 1.0, 2.0])
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    out = pathlib.Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)

    pairs = make_pairs(args.n, args.dim, q=args.latent_dim, seed=args.seed)
    n_train = int(round(args.train_frac * args.n))
    img_blocks = [pairs.image[:n_train]]
    txt_blocks = [pairs.text[:n_train]]
    splits = ["train"] * n_train

    held_img, held_txt = pairs.image[n_train:], pairs.text[n_train:]
    for block_i, level in enumerate([0.0] + list(args.levels)):
        img_blocks.append(corrupt(held_img, level, seed=100 + block_i))
        txt_blocks.append(corrupt(held_txt, level, seed=200 + block_i))
        splits += ["test"] * len(held_img)

    image = np.vstack(img_blocks)
    text = np.vstack(txt_blocks)
    write_embeddings(image, out / "images.bin")
    write_embeddings(text, out / "texts.bin")

    lines = []
    for row, split in enumerate(splits):
        lines.append(f"pair-{row}\t{row}\t{row}\tg{row}\t{split}")
    (out / "pairs.tsv").write_text("\n".join(lines) + "\n")

    n_test = len(splits) - n_train
    print(f"wrote {image.shape[0]} rows (train {n_train}, test {n_test}, "
          f"levels {[0.0] + list(args.levels)}) to {out}/")


if __name__ == "__main__":
    main()

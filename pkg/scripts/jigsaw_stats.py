"""Permutation-set diagnostics and augmentation frequencies of generated puzzles."""

import argparse
import time

import numpy as np

from cctransfer import jigsaw, permset
from cctransfer.dataio import RawImage


def main():
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    p.add_argument("--count", type=int, default=10_000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--images", type=int, default=6, help="random 256x256 images to draw from")
    args = p.parse_args()

    t0 = time.perf_counter()
    ps = permset.generate(9, 701, 3, seed=args.seed)
    print(permset.verify(ps), f"({time.perf_counter() - t0:.2f}s)")

    imgs = [RawImage.from_array(np.random.default_rng(i).integers(0, 256, (256, 256, 3), dtype=np.uint8))
            for i in range(args.images)]
    gray, occ = 0, np.zeros(3, dtype=int)
    t0 = time.perf_counter()
    for s in jigsaw.iter_samples(imgs, ps, jigsaw.PuzzleConfig(), args.count, seed=args.seed):
        gray += s.is_gray
        occ[s.n_occluders] += 1
    print(f"{args.count} samples in {time.perf_counter() - t0:.1f}s")
    print(f"grayscale fraction: {gray / args.count:.4f}")
    print("occluder count frequencies:", " ".join(f"{k}:{v / args.count:.4f}" for k, v in enumerate(occ)))


if __name__ == "__main__":
    main()

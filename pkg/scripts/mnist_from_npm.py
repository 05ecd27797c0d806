"""Build IDX files from the 10,000 MNIST digits bundled in the npm ``mnist`` package.

The package stores each digit class as JSON (``src/digits/<k>.json``) with pixel
intensities k/255 rounded to three decimals; rounding ``v * 255`` recovers the
original bytes exactly. Examples are interleaved with a fixed shuffle so that
contiguous splits are class-balanced.

    npm pack mnist && tar xzf mnist-1.1.0.tgz
    python scripts/mnist_from_npm.py package/src/digits data/mnist
"""

import argparse
import json
import os

import numpy as np

from niceflow.data import write_idx


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("digits_dir")
    ap.add_argument("out_dir")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    images, labels = [], []
    for k in range(10):
        with open(os.path.join(args.digits_dir, f"{k}.json")) as fh:
            flat = np.asarray(json.load(fh)["data"], dtype=np.float64)
        if flat.size % 784:
            raise SystemExit(f"{k}.json holds {flat.size} values, not a multiple of 784")
        raw = np.rint(flat * 255.0)
        if np.abs(flat * 255.0 - raw).max() > 0.26:
            raise SystemExit(f"{k}.json does not look like rounded k/255 intensities")
        images.append(raw.astype(np.uint8).reshape(-1, 28, 28))
        labels.append(np.full(images[-1].shape[0], k, dtype=np.uint8))
    images = np.concatenate(images)
    labels = np.concatenate(labels)
    order = np.random.default_rng(args.seed).permutation(images.shape[0])

    os.makedirs(args.out_dir, exist_ok=True)
    write_idx(os.path.join(args.out_dir, "images-idx3-ubyte"), images[order])
    write_idx(os.path.join(args.out_dir, "labels-idx1-ubyte"), labels[order])
    print(f"wrote {images.shape[0]} images to {args.out_dir}")


if __name__ == "__main__":
    main()

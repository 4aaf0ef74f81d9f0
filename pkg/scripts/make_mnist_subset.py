"""Write the 5000-image MNIST sample shipped with mlxtend as IDX files.

The sample holds 500 images per digit. The first 400 of each digit go to the
training files and the remaining 100 to the test files, so the output
directory loads with ``dpvd --dataset mnist --data-path DIR``.
"""

import argparse
import gzip
from pathlib import Path

import numpy as np

from dpvd.datasets import MNIST_FILES, write_mnist_idx

TRAIN_PER_CLASS = 400


def mlxtend_sample_path() -> Path:
    import mlxtend

    return Path(mlxtend.__file__).parent / "data" / "data" / "mnist_5k.csv.gz"


def load_sample(path):
    with gzip.open(path, "rt") as fh:
        table = np.loadtxt(fh, delimiter=",", dtype=np.int64)
    return table[:, :-1].astype(np.uint8), table[:, -1]


def stratified_split(labels, train_per_class=TRAIN_PER_CLASS):
    train, test = [], []
    for digit in range(10):
        rows = np.flatnonzero(labels == digit)
        train.extend(rows[:train_per_class])
        test.extend(rows[train_per_class:])
    return np.sort(train), np.sort(test)


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("out_dir")
    parser.add_argument("--source", help="mnist_5k.csv.gz (defaults to the mlxtend copy)")
    parser.add_argument("--train-per-class", type=int, default=TRAIN_PER_CLASS)
    args = parser.parse_args(argv)
    pixels, labels = load_sample(args.source or mlxtend_sample_path())
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for split, rows in zip(("train", "test"), stratified_split(labels, args.train_per_class)):
        images, label_file = MNIST_FILES[split]
        write_mnist_idx(pixels[rows].reshape(-1, 28, 28), labels[rows], out / images, out / label_file)
        print(f"{split}: {len(rows)} images")


if __name__ == "__main__":
    main()

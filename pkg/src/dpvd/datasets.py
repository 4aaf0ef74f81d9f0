"""Loaders for MNIST (IDX binaries) and UCI DIGITS (CSV), plus an npz cache."""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
N_CLASSES = 10
DIGITS_TRAIN_ROWS = 1439
DIGITS_MAX_VALUE = 16


class DatasetError(ValueError):
    """Malformed or inconsistent dataset file."""


@dataclass
class LabeledDataset:
    features: np.ndarray
    labels: np.ndarray
    name: str = ""
    split: str = "train"

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64).ravel()
        if self.features.ndim != 2 or len(self.features) != len(self.labels):
            raise DatasetError("features must be 2-D with one row per label")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= N_CLASSES):
            raise DatasetError("labels outside 0..9")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    def subset(self, index) -> "LabeledDataset":
        return LabeledDataset(self.features[index], self.labels[index], self.name, self.split)


def _open(path):
    path = Path(path)
    if path.suffix == ".gz":
        return gzip.open(path, "rb")
    return open(path, "rb")


def _read_idx(path, magic: int, header_ints: int) -> tuple[tuple[int, ...], bytes]:
    with _open(path) as fh:
        raw = fh.read()
    need = 4 * (1 + header_ints)
    if len(raw) < need:
        raise DatasetError(f"{path}: truncated header")
    found, *dims = struct.unpack(f">{1 + header_ints}I", raw[:need])
    if found != magic:
        raise DatasetError(f"{path}: bad magic 0x{found:08x}, expected 0x{magic:08x}")
    body = raw[need:]
    expected = int(np.prod(dims))
    if len(body) != expected:
        raise DatasetError(f"{path}: expected {expected} payload bytes, found {len(body)}")
    return tuple(dims), body


def load_mnist_idx(images_path, labels_path, name: str = "mnist", split: str = "train") -> LabeledDataset:
    (n_img, n_rows, n_cols), pixels = _read_idx(images_path, IDX_IMAGES_MAGIC, 3)
    (n_lab,), labels = _read_idx(labels_path, IDX_LABELS_MAGIC, 1)
    if n_img != n_lab:
        raise DatasetError(f"{n_img} images but {n_lab} labels")
    images = np.frombuffer(pixels, dtype=np.uint8).reshape(n_img, n_rows * n_cols)
    return LabeledDataset(images / 255.0, np.frombuffer(labels, dtype=np.uint8), name, split)


def write_mnist_idx(images: np.ndarray, labels: np.ndarray, images_path, labels_path) -> None:
    """Write uint8 images of shape (n, rows, cols) and labels in IDX format."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    n, r, c = images.shape
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">4I", IDX_IMAGES_MAGIC, n, r, c))
        fh.write(images.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">2I", IDX_LABELS_MAGIC, len(labels)))
        fh.write(labels.tobytes())


def _parse_digits_rows(path, header: bool) -> tuple[np.ndarray, np.ndarray]:
    with _open(path) as fh:
        lines = fh.read().decode("ascii").splitlines()
    if header:
        lines = lines[1:]
    feats, labels = [], []
    for lineno, line in enumerate(lines, start=2 if header else 1):
        if not line.strip():
            continue
        cells = line.split(",")
        if len(cells) != 65:
            raise DatasetError(f"{path}:{lineno}: expected 65 columns, found {len(cells)}")
        try:
            values = [float(v) for v in cells]
        except ValueError as err:
            raise DatasetError(f"{path}:{lineno}: {err}") from None
        label = values[-1]
        if label != int(label) or not 0 <= label < N_CLASSES:
            raise DatasetError(f"{path}:{lineno}: label {cells[-1]!r} outside 0..9")
        row = values[:-1]
        if min(row) < 0 or max(row) > DIGITS_MAX_VALUE:
            raise DatasetError(f"{path}:{lineno}: pixel outside 0..{DIGITS_MAX_VALUE}")
        feats.append(row)
        labels.append(int(label))
    return np.array(feats, dtype=np.float64).reshape(-1, 64), np.array(labels, dtype=np.int64)


def digits_test_rows(n_rows: int, n_train: int = DIGITS_TRAIN_ROWS, rule: str = "interleaved") -> np.ndarray:
    """Row indices of the test split.

    ``"interleaved"`` takes ``n_rows - n_train`` rows evenly spaced through
    the file, so every writer block contributes to both splits. ``"head"``
    keeps the first ``n_train`` rows for training.
    """
    n_test = n_rows - n_train
    if n_test < 0:
        raise DatasetError(f"file has {n_rows} rows, fewer than n_train={n_train}")
    if rule == "head":
        return np.arange(n_train, n_rows)
    if rule == "interleaved":
        if n_test == 0:
            return np.arange(0)
        return np.round(np.linspace(0, n_rows - 1, n_test)).astype(np.int64)
    raise ValueError(f"unknown split rule {rule!r}")


def load_digits_csv(path, header: bool = False, n_train: int = DIGITS_TRAIN_ROWS,
                    split_rule: str = "interleaved"):
    """Parse a DIGITS CSV (64 pixel counts in 0..16, then the label).

    Returns ``(train, test)`` with features scaled to [0, 1]. Gzipped files
    are read transparently.
    """
    x, y = _parse_digits_rows(path, header)
    x = x / DIGITS_MAX_VALUE
    is_test = np.zeros(len(y), dtype=bool)
    is_test[digits_test_rows(len(y), n_train, split_rule)] = True
    train = LabeledDataset(x[~is_test], y[~is_test], "digits", "train")
    test = LabeledDataset(x[is_test], y[is_test], "digits", "test")
    return train, test


def sklearn_digits_path() -> Path:
    """Location of the DIGITS CSV bundled with scikit-learn."""
    import sklearn

    return Path(sklearn.__file__).parent / "datasets" / "data" / "digits.csv.gz"


def normalize_check(ds: LabeledDataset) -> bool:
    f = ds.features
    return bool(np.all((f >= 0) & (f <= 1)))


def save_cache(ds: LabeledDataset, path) -> None:
    with open(path, "wb") as fh:
        np.savez(fh, features=ds.features, labels=ds.labels, name=np.array(ds.name), split=np.array(ds.split))


def load_cache(path) -> LabeledDataset:
    with np.load(path) as data:
        return LabeledDataset(data["features"], data["labels"], str(data["name"]), str(data["split"]))


MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}
BENCHMARKS = ("digits", "mnist")


def _find(directory: Path, stem: str) -> Path:
    for name in (stem, stem + ".gz", stem.replace("-idx", ".idx")):
        if (directory / name).exists():
            return directory / name
    raise FileNotFoundError(f"{directory}: no {stem} (or .gz)")


def load_benchmark(name: str, path=None, split_rule: str = "interleaved"):
    """``(train, test)`` for ``"digits"`` (CSV file) or ``"mnist"`` (IDX directory).

    DIGITS falls back to the copy bundled with scikit-learn when ``path`` is
    omitted. MNIST needs a directory holding the four standard IDX files.
    """
    if name == "digits":
        path = sklearn_digits_path() if path is None else Path(path)
        if not path.is_file():
            raise FileNotFoundError(f"DIGITS file not found: {path}")
        return load_digits_csv(path, split_rule=split_rule)
    if name == "mnist":
        if path is None or not Path(path).is_dir():
            raise FileNotFoundError(f"MNIST directory not found: {path}")
        parts = []
        for split, (images, labels) in MNIST_FILES.items():
            parts.append(load_mnist_idx(_find(Path(path), images), _find(Path(path), labels), "mnist", split))
        return tuple(parts)
    raise ValueError(f"unknown dataset {name!r}; expected one of {BENCHMARKS}")

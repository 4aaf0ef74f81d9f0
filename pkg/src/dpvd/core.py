"""Dense float64 matrix helpers and a seeded, counter-based random stream.

Matrices are plain 2-D ``numpy.ndarray`` objects of dtype float64. The
functions here validate shapes and finiteness so that numerical problems
surface at the call that produced them.
"""

from __future__ import annotations

import numpy as np

Matrix = np.ndarray


class DimensionError(ValueError):
    """Operand shapes do not compose."""


def as_matrix(values) -> Matrix:
    m = np.asarray(values, dtype=np.float64)
    if m.ndim == 1:
        m = m.reshape(1, -1)
    if m.ndim != 2:
        raise DimensionError(f"expected a 2-D matrix, got ndim={m.ndim}")
    return m


def _finite(m: Matrix) -> Matrix:
    if not np.all(np.isfinite(m)):
        raise FloatingPointError("non-finite entries produced")
    return m


class Rng:
    """Deterministic normal/uniform stream built on the Philox counter generator.

    Identical seeds give bit-identical streams for an identical call
    sequence. ``spawn`` derives independent child streams for parallel
    consumers.
    """

    def __init__(self, seed: int = 0):
        self.seed = int(seed)
        self._seq = np.random.SeedSequence(self.seed)
        self._gen = np.random.Generator(np.random.Philox(self._seq))

    def normal(self, shape) -> np.ndarray:
        return self._gen.standard_normal(shape)

    def uniform(self, shape) -> np.ndarray:
        return self._gen.random(shape)

    def choice(self, n: int, size: int) -> np.ndarray:
        return self._gen.choice(n, size=size, replace=False)

    def spawn(self, n: int) -> list["Rng"]:
        children = []
        for child_seq in self._seq.spawn(n):
            child = Rng.__new__(Rng)
            child.seed = self.seed
            child._seq = child_seq
            child._gen = np.random.Generator(np.random.Philox(child_seq))
            children.append(child)
        return children


def matmul(a: Matrix, b: Matrix) -> Matrix:
    a, b = as_matrix(a), as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"cannot multiply {a.shape} by {b.shape}")
    return _finite(a @ b)


def transpose(a: Matrix) -> Matrix:
    return as_matrix(a).T.copy()


def _same_shape(a: Matrix, b: Matrix) -> tuple[Matrix, Matrix]:
    a, b = as_matrix(a), as_matrix(b)
    if a.shape != b.shape:
        raise DimensionError(f"shape mismatch {a.shape} vs {b.shape}")
    return a, b


def add(a: Matrix, b: Matrix) -> Matrix:
    a, b = _same_shape(a, b)
    return _finite(a + b)


def sub(a: Matrix, b: Matrix) -> Matrix:
    a, b = _same_shape(a, b)
    return _finite(a - b)


def mul(a: Matrix, b: Matrix) -> Matrix:
    a, b = _same_shape(a, b)
    return _finite(a * b)


def scale(a: Matrix, s: float) -> Matrix:
    return _finite(as_matrix(a) * float(s))


def relu(a: Matrix) -> Matrix:
    return np.maximum(as_matrix(a), 0.0)


def log_softmax(logits: Matrix) -> Matrix:
    z = as_matrix(logits)
    shifted = z - z.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax(logits: Matrix) -> Matrix:
    return np.exp(log_softmax(logits))


def rows(a: Matrix, index) -> Matrix:
    """Row slice by integer index array or slice."""
    return as_matrix(a)[index]


def gaussian_sample(rng: Rng, n_rows: int, n_cols: int, mean: float = 0.0, std: float = 1.0) -> Matrix:
    if std < 0:
        raise ValueError(f"std must be non-negative, got {std}")
    if std == 0:
        return np.full((n_rows, n_cols), float(mean))
    return mean + std * rng.normal((n_rows, n_cols))


def l2_norm(v: Matrix) -> float:
    return float(np.sqrt(np.sum(np.square(np.asarray(v, dtype=np.float64)))))


def clip_to_norm(v: Matrix, c: float) -> Matrix:
    """Scale ``v`` down so its Euclidean norm is at most ``c``."""
    if not c > 0:
        raise ValueError(f"clip bound must be positive, got {c}")
    v = np.asarray(v, dtype=np.float64)
    return v / max(1.0, l2_norm(v) / c)

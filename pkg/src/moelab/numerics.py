"""Shared numeric substrate: validated float64 matrices, stable elementary
functions, and a splittable counter-based random number generator.

Everything downstream routes its arithmetic through this module so that
determinism and numeric conventions live in one place.  Matrices are plain
2-D float64 numpy arrays; construction from external input goes through
:func:`as_matrix`, which enforces shape and finiteness.
"""

from __future__ import annotations

import math

import numpy as np

Matrix = np.ndarray


def as_matrix(data, name: str = "matrix") -> Matrix:
    """Coerce ``data`` to a 2-D float64 array, rejecting non-finite entries.

    Use this at every boundary where numbers enter from outside (files,
    CLI arguments, user-constructed lists).  Internal intermediate values
    are trusted and skip the check.
    """
    m = np.asarray(data, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {m.shape}")
    if m.size and not np.isfinite(m).all():
        raise ValueError(f"{name} contains non-finite entries")
    return m


def matmul(a: Matrix, b: Matrix) -> Matrix:
    """Matrix product with an explicit inner-dimension check."""
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError("matmul expects 2-D operands")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"inner dimensions differ: {a.shape} x {b.shape}")
    return a @ b


def stable_softmax(x: Matrix, axis: int = -1) -> Matrix:
    """Softmax with max-subtraction; invariant under a constant shift.

    Returns strictly positive values summing to one along ``axis``.
    Ordering of the input is preserved (exp is monotone, and exact ties
    stay exact because both entries see the same shift).
    """
    x = np.asarray(x, dtype=np.float64)
    shifted = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def sigmoid(x: Matrix) -> Matrix:
    """Elementwise logistic function, computed without overflow.

    For x >= 0 uses 1/(1+exp(-x)); for x < 0 uses exp(x)/(1+exp(x)).
    """
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def round_half_up(x: float) -> int:
    """Round to the nearest integer, with .5 rounding toward +inf."""
    return int(math.floor(x + 0.5))


def read_matrix_csv(path) -> Matrix:
    """Read a dense matrix from comma-separated text, one row per line.

    Decimal separator is '.', no header.  All rows must have the same
    number of fields and every value must be finite.
    """
    rows: list[list[float]] = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rows.append([float(tok) for tok in line.split(",")])
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
    if not rows:
        raise ValueError(f"{path}: no rows")
    width = len(rows[0])
    for lineno, row in enumerate(rows, start=1):
        if len(row) != width:
            raise ValueError(
                f"{path}: row {lineno} has {len(row)} fields, expected {width}"
            )
    return as_matrix(rows, name=str(path))


def write_matrix_csv(path, m: Matrix) -> None:
    """Write a matrix as comma-separated text with round-trip precision."""
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError("write_matrix_csv expects a 2-D matrix")
    with open(path, "w", encoding="utf-8") as fh:
        for row in m:
            fh.write(",".join(repr(float(v)) for v in row))
            fh.write("\n")


class Rng:
    """Deterministic splittable RNG on a counter-based generator (Philox).

    A stream is identified by a tuple of integers.  ``split(i)`` derives an
    independent child stream by appending ``i`` to the tuple, so parallel
    or per-sequence generation stays reproducible no matter the order in
    which streams are consumed.
    """

    def __init__(self, seed) -> None:
        if isinstance(seed, Rng):
            raise TypeError("seed must be an int or tuple of ints, not an Rng")
        key = tuple(seed) if isinstance(seed, (tuple, list)) else (int(seed),)
        if not all(isinstance(k, int) or hasattr(k, "__index__") for k in key):
            raise TypeError("seed components must be integers")
        self.key = tuple(int(k) for k in key)
        self._gen = np.random.Generator(
            np.random.Philox(np.random.SeedSequence(self.key))
        )

    def split(self, index: int) -> "Rng":
        """Derive the ``index``-th child stream. Children never collide."""
        return Rng(self.key + (int(index),))

    def uniform(self, shape, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        return self._gen.uniform(low, high, size=shape)

    def normal(self, shape, mean: float = 0.0, std: float = 1.0) -> np.ndarray:
        return self._gen.normal(mean, std, size=shape)

    def integers(self, low: int, high: int, shape=None) -> np.ndarray:
        """Integers drawn uniformly from [low, high) as numpy int64."""
        return self._gen.integers(low, high, size=shape)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def __repr__(self) -> str:
        return f"Rng(key={self.key})"

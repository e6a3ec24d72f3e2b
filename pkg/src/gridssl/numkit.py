"""Deterministic numeric kernel: matrices, seeded RNG, finite differences.

All numeric state in this package lives in dense 2-D float64 numpy arrays
("matrices", batch along rows). The RNG is numpy's Philox counter-based
generator; child streams are derived from a (seed, tag) key pair so every
consumer owns an independent, reproducible stream.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

Matrix = np.ndarray


class ShapeError(ValueError):
    """Operand shapes do not satisfy an operation's contract."""


def matrix(data, rows: int | None = None, cols: int | None = None) -> Matrix:
    """Build a validated 2-D float64 matrix from nested lists or an array."""
    m = np.array(data, dtype=np.float64, order="C")
    if m.ndim == 1:
        m = m.reshape(1, -1)
    if m.ndim != 2:
        raise ShapeError(f"matrix must be 2-D, got ndim={m.ndim}")
    if rows is not None and m.shape != (rows, cols):
        raise ShapeError(f"expected shape ({rows}, {cols}), got {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError("matrix entries must be finite")
    return m


def zeros(rows: int, cols: int) -> Matrix:
    return np.zeros((rows, cols), dtype=np.float64)


def check_matrix(m: Matrix) -> Matrix:
    """Debug validator: 2-D float64 with finite entries."""
    if not isinstance(m, np.ndarray) or m.ndim != 2 or m.dtype != np.float64:
        raise ShapeError(f"not a float64 matrix: ndim={getattr(m, 'ndim', None)}")
    if not np.all(np.isfinite(m)):
        raise ValueError("matrix contains NaN/Inf")
    return m


def matmul(a: Matrix, b: Matrix) -> Matrix:
    """Standard matrix product with float64 accumulation."""
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError("matmul operands must be 2-D")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    return a @ b


def softmax_rows(m: Matrix) -> Matrix:
    """Row-wise softmax with per-row max subtraction for overflow safety."""
    z = m - m.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def finite_diff_grad(f: Callable[[Matrix], float], at: Matrix, eps: float = 1e-5) -> Matrix:
    """Central-difference gradient of a scalar function, entry by entry.

    Slow by construction; this is the oracle the analytic backprop is
    checked against, so it must stay independent of any backprop code.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    x = np.array(at, dtype=np.float64)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = x[idx]
        x[idx] = orig + eps
        fp = f(x)
        x[idx] = orig - eps
        fm = f(x)
        x[idx] = orig
        g[idx] = (fp - fm) / (2.0 * eps)
    return g


class Rng:
    """Seeded Philox stream. Identical seed => identical draws, any platform.

    `child(tag)` derives an independent stream keyed by (seed, tag); tags are
    small integers assigned one per purpose (init, shuffle, noise, ...) or per
    sample, so adding draws to one stream never perturbs another.
    """

    def __init__(self, seed: int, tag: int = 0):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.tag = int(tag) & 0xFFFFFFFFFFFFFFFF
        self._gen = np.random.Generator(np.random.Philox(key=[self.seed, self.tag]))

    def child(self, tag: int) -> "Rng":
        if tag == self.tag:
            raise ValueError("child tag must differ from own tag")
        return Rng(self.seed, tag)

    def gaussian(self, rows: int, cols: int, mean: float = 0.0, std: float = 1.0) -> Matrix:
        if std < 0:
            raise ValueError("std must be >= 0")
        return self._gen.normal(mean, std, size=(rows, cols))

    def uniform(self, rows: int, cols: int, low: float = 0.0, high: float = 1.0) -> Matrix:
        return self._gen.uniform(low, high, size=(rows, cols))

    def bernoulli(self, rows: int, cols: int, p_keep: float) -> Matrix:
        """{0,1} keep-mask with P(1) = p_keep."""
        if not 0.0 <= p_keep <= 1.0:
            raise ValueError("p_keep must be in [0, 1]")
        if p_keep == 1.0:
            return np.ones((rows, cols), dtype=np.float64)
        if p_keep == 0.0:
            return np.zeros((rows, cols), dtype=np.float64)
        return (self._gen.random(size=(rows, cols)) < p_keep).astype(np.float64)

    def integers(self, low: int, high: int, size: int) -> np.ndarray:
        """Uniform integers in [low, high), shape (size,)."""
        return self._gen.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)


def rng_gaussian(rng: Rng, rows: int, cols: int, mean: float = 0.0, std: float = 1.0) -> Matrix:
    return rng.gaussian(rows, cols, mean, std)


def rng_uniform(rng: Rng, rows: int, cols: int, low: float = 0.0, high: float = 1.0) -> Matrix:
    return rng.uniform(rows, cols, low, high)


def rng_bernoulli(rng: Rng, rows: int, cols: int, p_keep: float) -> Matrix:
    return rng.bernoulli(rows, cols, p_keep)

"""Dense numerical substrate: checked matmul, sigmoid, PCA and seeded RNG streams.

Matrices and vectors are plain ``numpy.float64`` arrays. Every random draw in
the package comes from a ``numpy.random.Generator`` over PCG64, which yields the
same stream for the same seed on every platform numpy supports.
"""

from __future__ import annotations

import zlib

import numpy as np

SIGMOID_CLAMP = 500.0
_BELOW_ONE = np.nextafter(1.0, 0.0)


class ShapeError(ValueError):
    """Operand shapes do not conform."""


class RankError(ValueError):
    """Covariance rank is too low for the requested number of components."""

    def __init__(self, requested: int, achievable: int):
        super().__init__(
            f"requested {requested} principal components but the centered data "
            f"only has rank {achievable}"
        )
        self.requested = requested
        self.achievable = achievable


def as_matrix(a) -> np.ndarray:
    m = np.asarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got shape {m.shape}")
    return m


def matmul(a, b) -> np.ndarray:
    """Matrix product with shape checking.

    Backed by numpy/BLAS; results agree with a left-to-right naive triple
    loop to within 1e-12 and are bit-identical across reruns on one machine.
    """
    a = as_matrix(a)
    b = as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape[0]}x{a.shape[1]} by {b.shape[0]}x{b.shape[1]}")
    return a @ b


def sigmoid(x):
    """Logistic function, elementwise; arguments are clamped to +-500.

    Large arguments would round to exactly 1.0, so the result is capped at
    the largest double below 1 to keep it inside the open unit interval.
    """
    z = np.clip(x, -SIGMOID_CLAMP, SIGMOID_CLAMP)
    return np.minimum(1.0 / (1.0 + np.exp(-z)), _BELOW_ONE)


def pca_components(samples, k: int, rank_tol: float = 1e-10) -> tuple[np.ndarray, np.ndarray]:
    """Leading ``k`` principal directions of ``samples`` (rows are observations).

    Returns ``(components, means)`` where ``components`` is ``cols x k`` with
    orthonormal columns sorted by decreasing eigenvalue of the sample
    covariance. Each column is signed so its largest-magnitude entry is
    positive.
    """
    x = as_matrix(samples)
    rows, cols = x.shape
    if rows < 2:
        raise ValueError("PCA needs at least two samples")
    if not 1 <= k <= min(rows, cols):
        raise ValueError(f"k={k} must lie in [1, {min(rows, cols)}]")
    means = x.mean(axis=0)
    centered = x - means
    cov = centered.T @ centered / (rows - 1)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1]
    evals = evals[order]
    evecs = evecs[:, order]
    scale = max(evals[0], 0.0)
    rank = int(np.sum(evals > rank_tol * max(scale, np.finfo(float).tiny)))
    if scale <= 0.0:
        rank = 0
    if rank < k:
        raise RankError(k, rank)
    comps = evecs[:, :k].copy()
    for j in range(k):
        pivot = np.argmax(np.abs(comps[:, j]))
        if comps[pivot, j] < 0:
            comps[:, j] = -comps[:, j]
    return comps, means


def pca_project(samples, components: np.ndarray, means: np.ndarray) -> np.ndarray:
    return (as_matrix(samples) - means) @ components


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(int(seed) & 0xFFFFFFFFFFFFFFFF))


def sub_seed(seed: int, name: str) -> int:
    """Derive a named child seed from a root seed.

    The child is the first 64-bit word drawn from ``SeedSequence([seed, crc32(name)])``,
    so each pipeline stage gets an independent, documented stream.
    """
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, zlib.crc32(name.encode())])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def child_rng(seed: int, name: str) -> np.random.Generator:
    return make_rng(sub_seed(seed, name))

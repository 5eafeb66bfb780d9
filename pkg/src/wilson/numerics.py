"""Dense linear algebra helpers, seeded RNG streams and Hutchinson probes.

Matrices are plain float64 ``numpy.ndarray`` objects; the helpers here add the
validation the rest of the package relies on (symmetry checks, finiteness,
ordering conventions) on top of LAPACK.
"""

from __future__ import annotations

import numpy as np

from wilson.errors import InvalidDimension, InvalidMatrix

SYMMETRY_TOL = 1e-10


class SeededRng:
    """Reproducible random stream.

    Wraps a PCG64 generator, whose output is specified bit-for-bit and does not
    depend on platform. Child streams are derived by seed-splitting so a worker
    can own one without sharing state with its parent.
    """

    def __init__(self, seed: int, _spawn_key: tuple[int, ...] = ()):
        if seed < 0 or seed >= 2**64:
            raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed}")
        self.seed = int(seed)
        self.spawn_key = tuple(_spawn_key)
        self._seq = np.random.SeedSequence(entropy=self.seed, spawn_key=self.spawn_key)
        self.generator = np.random.Generator(np.random.PCG64(self._seq))

    def child(self, index: int) -> "SeededRng":
        """Independent stream number ``index`` (same result regardless of call order)."""
        return SeededRng(self.seed, self.spawn_key + (int(index),))

    def state(self) -> dict:
        """Bit-generator state, for logging alongside a run."""
        return self.generator.bit_generator.state

    def __repr__(self) -> str:
        return f"SeededRng(seed={self.seed}, spawn_key={self.spawn_key})"


def as_rng(rng: SeededRng | int) -> SeededRng:
    return rng if isinstance(rng, SeededRng) else SeededRng(int(rng))


def rademacher_probe(rng: SeededRng, dim: int, n: int | None = None) -> np.ndarray:
    """Draw a ±1 probe of length ``dim`` (or an ``(n, dim)`` stack of them)."""
    if dim < 1:
        raise InvalidDimension(f"probe dimension must be >= 1, got {dim}")
    shape = (dim,) if n is None else (n, dim)
    bits = rng.generator.integers(0, 2, size=shape, dtype=np.int8)
    return (2.0 * bits - 1.0).astype(np.float64)


def gaussian_probe(rng: SeededRng, dim: int, n: int | None = None) -> np.ndarray:
    if dim < 1:
        raise InvalidDimension(f"probe dimension must be >= 1, got {dim}")
    shape = (dim,) if n is None else (n, dim)
    return rng.generator.standard_normal(shape)


def draw_probes(rng: SeededRng, dim: int, n: int, kind: str = "rademacher") -> np.ndarray:
    if kind == "rademacher":
        return rademacher_probe(rng, dim, n)
    if kind == "gaussian":
        return gaussian_probe(rng, dim, n)
    raise ValueError(f"unknown probe kind {kind!r}")


def _check_finite(m: np.ndarray, what: str = "matrix") -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2:
        raise InvalidMatrix(f"{what} must be 2-D, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise InvalidMatrix(f"{what} has non-finite entries")
    return m


def eigh_spd(m: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Eigen-decomposition of a symmetric PSD matrix, eigenvalues ascending."""
    m = _check_finite(m)
    if m.shape[0] != m.shape[1]:
        raise InvalidMatrix(f"expected a square matrix, got {m.shape}")
    if np.max(np.abs(m - m.T), initial=0.0) > SYMMETRY_TOL:
        raise InvalidMatrix("matrix is not symmetric")
    evals, evecs = np.linalg.eigh(0.5 * (m + m.T))
    return evals, evecs


def svd(m: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Thin SVD ``m = U diag(S) V^T`` with ``S`` descending.

    Returns ``V`` (not ``V^T``) so both factors are column-orthonormal.
    """
    m = _check_finite(m)
    u, s, vt = np.linalg.svd(m, full_matrices=False)
    return u, s, vt.T


def frobenius_norm(m: np.ndarray) -> float:
    m = np.asarray(m, dtype=np.float64)
    return float(np.sqrt(np.sum(m * m)))


def random_orthogonal(rng: SeededRng, d: int) -> np.ndarray:
    """Haar-distributed orthogonal matrix (QR of a Gaussian with sign fix)."""
    g = rng.generator.standard_normal((d, d))
    q, r = np.linalg.qr(g)
    return q * np.sign(np.diag(r))

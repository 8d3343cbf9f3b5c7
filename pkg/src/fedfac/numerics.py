"""
Dense numerics shared by every other module.

Matrices are plain ``float64`` numpy arrays. The helpers here add the
contract checks the rest of the package relies on (symmetry, finiteness,
descending spectra) and a hierarchical seeding scheme so that every random
draw in an experiment can be traced back to ``(master_seed, labels...)``.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Iterable, Sequence, Tuple, Union

import numpy as np


class ContractError(ValueError):
    """Raised when an input violates a documented precondition."""


class NumericalFailure(RuntimeError):
    """Raised when an iterative numerical routine fails to converge."""


@dataclass(frozen=True)
class EigenResult:
    """Eigenpairs of a symmetric matrix, largest eigenvalue first.

    ``eigenvectors[:, j]`` is the unit eigenvector for ``eigenvalues[j]``.
    """

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray


def as_matrix(values, name: str = "matrix") -> np.ndarray:
    """Coerce to a finite 2-D float64 array or raise ContractError."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 2:
        raise ContractError(f"{name} must be 2-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ContractError(f"{name} contains non-finite entries")
    return arr


def sym_eig(M, symmetry_tol: float = 1e-10) -> EigenResult:
    """
    Full eigendecomposition of a real symmetric matrix.

    Parameters
    ----------
    M : array-like, shape (n, n)
        Symmetric to within ``symmetry_tol`` (scaled by the largest entry).
    symmetry_tol : float
        Allowed asymmetry relative to ``max(1, max|M|)``.

    Returns
    -------
    EigenResult
        Eigenvalues sorted in non-increasing order with matching
        orthonormal eigenvector columns.

    Raises
    ------
    ContractError
        If ``M`` is not square, not finite or not symmetric.
    NumericalFailure
        If the underlying LAPACK driver does not converge.
    """
    M = as_matrix(M, "M")
    n, k = M.shape
    if n != k:
        raise ContractError(f"sym_eig needs a square matrix, got {n}x{k}")
    scale = max(1.0, float(np.max(np.abs(M)))) if M.size else 1.0
    if n and np.max(np.abs(M - M.T)) > symmetry_tol * scale:
        raise ContractError("sym_eig needs a symmetric matrix")
    if n == 0:
        return EigenResult(np.zeros(0), np.zeros((0, 0)))
    try:
        # symmetrize exactly so round-off asymmetry never leaks into LAPACK
        vals, vecs = np.linalg.eigh(0.5 * (M + M.T))
    except np.linalg.LinAlgError as exc:
        raise NumericalFailure(f"eigendecomposition of {n}x{n} matrix did not converge") from exc
    order = np.argsort(vals)[::-1]
    return EigenResult(vals[order], vecs[:, order])


def column_standardize(Z) -> Tuple[np.ndarray, np.ndarray]:
    """
    Center each column and scale it to unit sample standard deviation.

    The standard deviation uses the ``n - 1`` denominator. Columns with zero
    variance cannot be scaled; they are returned as zeros and flagged in the
    mask instead of raising, since constant parameter columns do occur.

    Returns
    -------
    Znorm : ndarray, shape (n, p)
    zero_variance : ndarray of bool, shape (p,)
    """
    Z = as_matrix(Z, "Z")
    n = Z.shape[0]
    if n < 2:
        raise ContractError("column_standardize needs at least 2 rows")
    centered = Z - Z.mean(axis=0)
    sd = np.sqrt(np.sum(centered * centered, axis=0) / (n - 1))
    magnitude = np.max(np.abs(Z), axis=0)
    zero_variance = sd <= 1e-13 * np.maximum(magnitude, 1e-300)
    safe_sd = np.where(zero_variance, 1.0, sd)
    Znorm = centered / safe_sd
    Znorm[:, zero_variance] = 0.0
    return Znorm, zero_variance


def correlation_matrix(Znorm) -> np.ndarray:
    """Sample correlation ``Znorm.T @ Znorm / (n - 1)`` of standardized columns.

    Flagged (all-zero) columns produce zero rows and columns.
    """
    Znorm = as_matrix(Znorm, "Znorm")
    n = Znorm.shape[0]
    if n < 2:
        raise ContractError("correlation_matrix needs at least 2 rows")
    R = Znorm.T @ Znorm / (n - 1)
    R = 0.5 * (R + R.T)
    live = np.any(Znorm != 0.0, axis=0)
    # unit diagonal is exact by construction; pin it against round-off
    R[np.diag_indices_from(R)] = np.where(live, 1.0, 0.0)
    return np.clip(R, -1.0, 1.0)


# ---------------------------------------------------------------------------
# random streams
# ---------------------------------------------------------------------------

Label = Tuple[str, int]


def _label_words(labels: Iterable[Label]) -> list:
    words = []
    for tag, index in labels:
        digest = hashlib.blake2b(str(tag).encode("utf-8"), digest_size=4).digest()
        words.append(int.from_bytes(digest, "little"))
        words.append(int(index) % 2**32)
        words.append(int(index) // 2**32 % 2**32)
    return words


def derive_rng(master_seed: int, labels: Sequence[Label] = ()) -> np.random.Generator:
    """
    Generator that is a pure function of ``master_seed`` and ``labels``.

    ``labels`` is an ordered sequence of ``(tag, index)`` pairs, e.g.
    ``[("round", 3), ("client", 12)]``. Streams derived from different label
    sequences are statistically independent, so per-client work can run in
    any order or in parallel without changing results.
    """
    seed = int(master_seed) % 2**64
    entropy = [seed % 2**32, seed // 2**32] + _label_words(labels)
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))


def rademacher(rng: np.random.Generator, size: Union[int, tuple]) -> np.ndarray:
    """Uniform draws from {-1, +1}."""
    return rng.choice(np.array([-1.0, 1.0]), size=size)

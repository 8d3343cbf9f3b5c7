"""
Factor-analysis split of hidden units into client-shared and personalized groups.

Pipeline for one layer:

1. stack every client's weight vector of unit ``j`` into column ``j`` of ``Z``;
2. standardize the columns and form the correlation matrix ``R``;
3. pick the factor count ``G`` from the cumulative eigenvalue share;
4. estimate loadings by iterated principal factors;
5. score each unit by its communality ``nu_j = sum_m a_jm^2``;
6. mark unit ``j`` shared iff ``nu_j >= tau``.

Units whose parameters move in step across clients are well explained by a
few common factors and end up shared; units that drift apart per client carry
more unique variance and end up personalized.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from .numerics import ContractError, column_standardize, correlation_matrix, sym_eig

log = logging.getLogger(__name__)


class DegenerateInput(ValueError):
    """The correlation spectrum carries no mass to split on."""


@dataclass(frozen=True)
class TauSpec:
    """Threshold rule on communalities.

    ``kind`` is ``"quantile"`` (``value`` in [0, 1]), ``"absolute"``, ``"inf"``
    (everything personalized) or ``"-inf"`` (everything shared).
    """

    kind: str
    value: float = 0.0

    def __post_init__(self):
        if self.kind not in ("quantile", "absolute", "inf", "-inf"):
            raise ContractError(f"unknown threshold kind {self.kind!r}")
        if self.kind == "quantile" and not 0.0 <= self.value <= 1.0:
            raise ContractError(f"quantile must lie in [0, 1], got {self.value}")

    @classmethod
    def parse(cls, text) -> "TauSpec":
        """Parse ``q0.5`` / ``50%`` (quantile), ``0.7`` (absolute), ``inf``, ``-inf``."""
        if isinstance(text, TauSpec):
            return text
        if isinstance(text, (int, float)):
            if math.isinf(text):
                return cls("inf" if text > 0 else "-inf")
            return cls("absolute", float(text))
        s = str(text).strip().lower()
        if s in ("inf", "+inf", "infinity", "+infinity"):
            return cls("inf")
        if s in ("-inf", "-infinity"):
            return cls("-inf")
        if s.startswith("q"):
            return cls("quantile", float(s[1:]))
        if s.endswith("%"):
            return cls("quantile", float(s[:-1]) / 100.0)
        try:
            return cls("absolute", float(s))
        except ValueError:
            raise ContractError(f"cannot parse threshold {text!r}") from None

    def resolve(self, nu: np.ndarray) -> float:
        if self.kind == "inf":
            return math.inf
        if self.kind == "-inf":
            return -math.inf
        if self.kind == "absolute":
            return float(self.value)
        return float(np.quantile(nu, self.value))

    def __str__(self) -> str:
        if self.kind == "quantile":
            return f"q{self.value:g}"
        if self.kind == "absolute":
            return f"{self.value:g}"
        return self.kind


@dataclass
class FactorConfig:
    kappa: float = 0.9
    tau: TauSpec = field(default_factory=lambda: TauSpec("quantile", 0.5))
    max_iter: int = 100
    tol: float = 1e-4

    def __post_init__(self):
        self.tau = TauSpec.parse(self.tau)
        if not 0.0 < self.kappa <= 1.0:
            raise ContractError(f"kappa must lie in (0, 1], got {self.kappa}")
        if self.max_iter < 1:
            raise ContractError("max_iter must be >= 1")


@dataclass
class LoadingMatrix:
    A: np.ndarray
    G: int
    psi: np.ndarray
    iterations_used: int
    converged: bool
    reduced_rank: bool = False
    heywood: bool = False
    residual_history: List[float] = field(default_factory=list)


@dataclass
class Partition:
    layer_id: int
    zeta: np.ndarray
    nu: np.ndarray
    tau: float = float("nan")
    G: int = 0
    kappa: float = float("nan")

    @property
    def I_s(self) -> np.ndarray:
        return np.flatnonzero(self.zeta)

    @property
    def I_p(self) -> np.ndarray:
        return np.flatnonzero(~self.zeta)

    def to_dict(self) -> dict:
        # JSON has no NaN; infinite thresholds are spelled out
        def num(v):
            v = float(v)
            if math.isnan(v):
                return None
            if math.isinf(v):
                return "inf" if v > 0 else "-inf"
            return v

        return {
            "layer": self.layer_id,
            "tau": num(self.tau),
            "G": int(self.G),
            "kappa": num(self.kappa),
            "nu": [num(v) for v in self.nu],
            "zeta": [int(v) for v in self.zeta],
        }


def assemble_input_matrix(client_weights: Sequence[np.ndarray]) -> np.ndarray:
    """
    Stack per-client layer weights into the factor-analysis input.

    Each client matrix is ``(d_in, d_l)`` with column ``j`` holding the
    parameters of unit ``j``. The result is ``(d_in * K, d_l)``: rows
    ``c*d_in .. (c+1)*d_in - 1`` come from client ``c``.
    """
    mats = [np.asarray(W, dtype=np.float64) for W in client_weights]
    if len(mats) < 2:
        raise ContractError("need parameters from at least 2 clients")
    shape = mats[0].shape
    if any(M.ndim != 2 or M.shape != shape for M in mats):
        raise ContractError("all client matrices must share the same 2-D shape")
    return np.vstack(mats)


def split_input_matrix(Z: np.ndarray, K: int) -> List[np.ndarray]:
    """Inverse of :func:`assemble_input_matrix`."""
    return list(np.split(np.asarray(Z), K, axis=0))


def select_num_factors(eigenvalues, kappa: float) -> int:
    """Smallest ``m`` whose cumulative eigenvalue share reaches ``kappa``."""
    gam = np.clip(np.asarray(eigenvalues, dtype=np.float64), 0.0, None)
    if np.any(np.diff(gam) > 1e-12 * max(1.0, float(gam.max(initial=0.0)))):
        raise ContractError("eigenvalues must be sorted in non-increasing order")
    total = gam.sum()
    if not total > 0:
        raise DegenerateInput("all-zero spectrum")
    ratio = np.cumsum(gam) / total
    # guard the comparison against round-off in the cumulative sum
    hits = np.flatnonzero(ratio >= kappa - 1e-12)
    return int(hits[0]) + 1


def _top_loadings(M: np.ndarray, G: int):
    eig = sym_eig(M)
    vals = eig.eigenvalues[:G]
    keep = vals > 0
    k = int(keep.sum())
    A = eig.eigenvectors[:, :G][:, keep] * np.sqrt(vals[keep])
    return A, k


def _offdiag_residual(R: np.ndarray, A: np.ndarray) -> float:
    E = R - A @ A.T
    np.fill_diagonal(E, 0.0)
    return float(np.linalg.norm(E))


def estimate_loadings(R, G: int, cfg: Optional[FactorConfig] = None) -> LoadingMatrix:
    """
    Iterated principal-factor estimate of a ``G``-factor loading matrix.

    Starts from ``A = (sqrt(g_1) u_1, ..., sqrt(g_G) u_G)`` of ``R`` itself,
    then alternates ``psi = diag(R - A A^T)`` and re-extracting the top ``G``
    positive eigenpairs of ``R - diag(psi)`` until ``max|psi_new - psi|`` drops
    below ``cfg.tol``. The uniqueness matrix is kept diagonal.

    Non-convergence is not an error: the last iterate is returned with
    ``converged=False``.
    """
    cfg = cfg or FactorConfig()
    R = np.asarray(R, dtype=np.float64)
    p = R.shape[0]
    if R.shape != (p, p):
        raise ContractError("R must be square")
    if not 1 <= G <= p:
        raise ContractError(f"G must lie in [1, {p}], got {G}")
    A, k = _top_loadings(R, G)
    reduced = k < G
    psi = np.diag(R) - np.sum(A * A, axis=1)
    history = [_offdiag_residual(R, A)]
    converged = False
    it = 0
    for it in range(1, cfg.max_iter + 1):
        R_star = R.copy()
        R_star[np.diag_indices(p)] -= psi
        A, k = _top_loadings(R_star, G)
        reduced |= k < G
        psi_new = np.diag(R) - np.sum(A * A, axis=1)
        history.append(_offdiag_residual(R, A))
        change = float(np.max(np.abs(psi_new - psi))) if p else 0.0
        psi = psi_new
        if change < cfg.tol:
            converged = True
            break
    heywood = bool(np.any(psi < -1e-9))
    if heywood:
        log.debug("Heywood case: %d communalities exceed 1", int(np.sum(psi < -1e-9)))
    return LoadingMatrix(
        A=A,
        G=A.shape[1],
        psi=psi,
        iterations_used=it,
        converged=converged,
        reduced_rank=reduced,
        heywood=heywood,
        residual_history=history,
    )


def communalities(A) -> np.ndarray:
    """Row sums of squared loadings, clipped into [0, 1]."""
    A = np.asarray(A.A if isinstance(A, LoadingMatrix) else A, dtype=np.float64)
    if A.ndim == 1:
        A = A[None, :]
    return np.clip(np.sum(A * A, axis=1), 0.0, 1.0)


def threshold_split(nu, tau, layer_id: int = 0) -> Partition:
    """Shared iff ``nu_j >= tau``; quantile thresholds interpolate linearly."""
    nu = np.asarray(nu, dtype=np.float64)
    if nu.size == 0:
        raise ContractError("threshold_split needs at least one unit")
    spec = TauSpec.parse(tau)
    t = spec.resolve(nu)
    return Partition(layer_id=layer_id, zeta=nu >= t, nu=nu, tau=t)


def decompose(
    client_weights: Sequence[np.ndarray],
    cfg: Optional[FactorConfig] = None,
    layer_id: int = 0,
) -> Partition:
    """
    Full pipeline from per-client ``(d_in, d_l)`` weights to a partition.

    Zero-variance columns cannot be correlated; they get ``nu = 0``. When the
    whole spectrum is degenerate every unit gets ``nu = 0``.
    """
    cfg = cfg or FactorConfig()
    Z = assemble_input_matrix(client_weights)
    Znorm, flat = column_standardize(Z)
    nu = np.zeros(Z.shape[1])
    G = 0
    live = ~flat
    if live.any():
        R = correlation_matrix(Znorm[:, live])
        spectrum = sym_eig(R).eigenvalues
        try:
            G = select_num_factors(spectrum, cfg.kappa)
        except DegenerateInput:
            G = 0
        if G:
            loadings = estimate_loadings(R, G, cfg)
            nu[live] = communalities(loadings.A)
            G = loadings.G
    part = threshold_split(nu, cfg.tau, layer_id=layer_id)
    part.G = G
    part.kappa = cfg.kappa
    return part

"""
Diagnostics: nearest-neighbour entropy of neuron outputs, partition stability
and accuracy summaries.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Iterable, Sequence, Tuple

import numpy as np
from scipy.special import digamma

from .numerics import ContractError

ENTROPY_FLOOR = -50.0
DUPLICATE_JITTER = 1e-12


@dataclass
class EntropyReport:
    entropy: np.ndarray
    k: int
    layer: int
    statistic: str = "mean"

    def __len__(self):
        return len(self.entropy)


def knn_entropy(samples, k: int = 3) -> float:
    """
    Kozachenko-Leonenko estimate of the differential entropy of 1-D samples.

    ``H = psi(n) - psi(k) + ln 2 + mean(ln eps_i)`` where ``eps_i`` is the
    distance from sample ``i`` to its ``k``-th nearest neighbour. Zero
    distances (ties) are replaced by ``1e-12``; the result is floored at -50.
    When every distance is a tie the samples have no spread at all and the
    floor is returned directly.
    """
    x = np.sort(np.asarray(samples, dtype=np.float64).ravel())
    n = x.size
    if k < 1:
        raise ContractError("k must be >= 1")
    if n <= k:
        raise ContractError(f"need more than k={k} samples, got {n}")
    # In sorted order the k nearest neighbours of x[i] lie within x[i-k .. i+k];
    # the k-th smallest of those 2k gaps is the k-th neighbour distance.
    pad = np.full(k, np.inf)
    xp = np.concatenate([pad * -1, x, pad])
    gaps = np.stack([np.abs(xp[k + s : k + s + n] - x) for s in range(-k, k + 1) if s != 0], axis=1)
    eps = np.partition(gaps, k - 1, axis=1)[:, k - 1]
    if not np.any(eps > 0):
        return ENTROPY_FLOOR
    eps = np.where(eps > 0, eps, DUPLICATE_JITTER)
    h = digamma(n) - digamma(k) + math.log(2.0) + float(np.mean(np.log(eps)))
    return float(max(h, ENTROPY_FLOOR))


def per_client_statistic(activations: np.ndarray, statistic: str = "mean") -> np.ndarray:
    """Collapse ``(n_samples, units)`` activations to one scalar per unit."""
    if statistic == "mean":
        return activations.mean(axis=0)
    if statistic == "median":
        return np.median(activations, axis=0)
    raise ContractError(f"statistic must be 'mean' or 'median', got {statistic!r}")


def neuron_entropy_report(
    mcfg, models: Sequence, probes: Sequence[np.ndarray], layer: int = 1, k: int = 3, statistic: str = "mean"
) -> EntropyReport:
    """
    Entropy across clients of each hidden unit's summarized output.

    ``models[c]`` is evaluated on ``probes[c]``; each unit's activations are
    reduced to one scalar per client and the ``C`` scalars are fed to
    :func:`knn_entropy`.
    """
    from .model import hidden_activations

    if len(models) != len(probes):
        raise ContractError("one probe set per model required")
    if len(models) < k + 2:
        raise ContractError(f"need at least k+2={k + 2} clients, got {len(models)}")
    stats = np.vstack(
        [per_client_statistic(hidden_activations(mcfg, p, X, layer), statistic) for p, X in zip(models, probes)]
    )
    ent = np.array([knn_entropy(stats[:, j], k) for j in range(stats.shape[1])])
    return EntropyReport(entropy=ent, k=k, layer=layer, statistic=statistic)


def stability_fraction(zeta_prev, zeta_curr) -> float:
    """Fraction of units whose shared/personalized state did not change."""
    a = np.asarray(zeta_prev, dtype=bool)
    b = np.asarray(zeta_curr, dtype=bool)
    if a.shape != b.shape:
        raise ContractError(f"length mismatch: {a.size} vs {b.size}")
    if a.size == 0:
        raise ContractError("empty partition")
    return float(np.mean(a == b))


def weighted_accuracy(pairs: Iterable[Tuple[float, float]]) -> float:
    """``sum n_c acc_c / sum n_c`` over ``(n_c, acc_c)`` pairs."""
    pairs = list(pairs)
    if not pairs:
        raise ContractError("weighted_accuracy needs at least one client")
    n = np.array([p[0] for p in pairs], dtype=np.float64)
    acc = np.array([p[1] for p in pairs], dtype=np.float64)
    if np.any(n <= 0):
        raise ContractError("client sizes must be positive")
    return float(np.sum(n * acc) / np.sum(n))


def loss_auc(losses: Sequence[float]) -> float:
    """Trapezoidal area under a per-round loss curve (unit spacing)."""
    y = np.asarray(losses, dtype=np.float64)
    if y.size < 2:
        return 0.0
    return float(np.sum(0.5 * (y[1:] + y[:-1])))


def write_entropy_csv(path, report: EntropyReport) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["neuron_id", "entropy"])
        for j, h in enumerate(report.entropy):
            w.writerow([j, repr(float(h))])

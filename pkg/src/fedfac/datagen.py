"""
Synthetic heterogeneous federations and partitioning of pooled data.

The synthetic generator builds clients whose covariates split into a shared
block ``x_s ~ N(0, I)`` and a personalized block ``x_p ~ N(mu_c, Sigma)``, and
whose labels come from a one-hidden-layer ReLU network with ``m1``
client-specific and ``m2`` common hidden units.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .numerics import ContractError, derive_rng


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


@dataclass
class SynthConfig:
    C: int = 100
    d: int = 100
    m: int = 200
    alpha: float = 0.4
    p: float = 0.5
    n_train: int = 200
    n_test: int = 50
    noise_sd: float = 1.0
    seed: int = 0
    # Shift y* by its pooled median before thresholding. Without it the
    # positive class is a few percent of all labels for typical draws.
    center_labels: bool = True

    @property
    def d2(self) -> int:
        return _round_half_up(self.alpha * self.d)

    @property
    def d1(self) -> int:
        return self.d - self.d2

    @property
    def m2(self) -> int:
        return _round_half_up(self.p * self.m)

    @property
    def m1(self) -> int:
        return self.m - self.m2

    def validate(self) -> None:
        for name in ("C", "d", "m", "n_train"):
            if int(getattr(self, name)) < 1:
                raise ContractError(f"{name} must be >= 1")
        if self.n_test < 0:
            raise ContractError("n_test must be >= 0")
        if not 0.0 <= self.alpha <= 1.0:
            raise ContractError(f"alpha must lie in [0, 1], got {self.alpha}")
        if not 0.0 <= self.p <= 1.0:
            raise ContractError(f"p must lie in [0, 1], got {self.p}")
        if self.noise_sd < 0:
            raise ContractError("noise_sd must be >= 0")


@dataclass
class ClientDataset:
    client_id: int
    X_train: np.ndarray
    y_train: np.ndarray
    X_test: np.ndarray
    y_test: np.ndarray

    def __post_init__(self):
        self.y_train = np.asarray(self.y_train, dtype=np.float64).reshape(-1)
        self.y_test = np.asarray(self.y_test, dtype=np.float64).reshape(-1)
        Xtr = np.asarray(self.X_train, dtype=np.float64)
        Xte = np.asarray(self.X_test, dtype=np.float64)
        # an empty split carries no width of its own
        d = next((X.shape[-1] for X in (Xtr, Xte) if X.ndim == 2 and X.shape[-1] > 0), 0)
        if d == 0:
            d = next((X.size // n for X, n in ((Xtr, len(self.y_train)), (Xte, len(self.y_test))) if n), 0)
        self.X_train = Xtr.reshape(len(self.y_train), d)
        self.X_test = Xte.reshape(len(self.y_test), d)

    @property
    def n_c(self) -> int:
        return len(self.y_train)

    @property
    def d(self) -> int:
        return self.X_train.shape[1] if self.n_c else self.X_test.shape[1]


@dataclass
class TrueModel:
    """Parameters of the generating network.

    Weight matrices are stored as ``(units, d)`` so that row ``j`` is the
    incoming weight vector of hidden unit ``j``.
    """

    W_shared: np.ndarray  # (m2, d), identical for every client
    W_personal: List[np.ndarray]  # C entries of shape (m1, d)
    a: np.ndarray  # (m,), personalized units first
    mu: List[np.ndarray]  # C client means of the personalized covariates
    m1: int
    m2: int
    offset: float = 0.0

    @property
    def shared_mask(self) -> np.ndarray:
        """True partition in the generator's unit order (personalized first)."""
        return np.r_[np.zeros(self.m1, bool), np.ones(self.m2, bool)]

    def client_weights(self, c: int) -> np.ndarray:
        """Full first-layer matrix ``(m, d)`` of client ``c``."""
        return np.vstack([self.W_personal[c], self.W_shared])

    def latent(self, c: int, X: np.ndarray) -> np.ndarray:
        W = self.client_weights(c)
        return np.maximum(X @ W.T, 0.0) @ self.a


def ar1_covariance(k: int, rho: float = 0.5) -> np.ndarray:
    idx = np.arange(k)
    return rho ** np.abs(np.subtract.outer(idx, idx))


def generate_synthetic_federation(cfg: SynthConfig) -> Tuple[List[ClientDataset], TrueModel]:
    """
    Draw a federation from the planted shared/personalized network.

    Covariates are ordered ``(x_p, x_s)``: the first ``d1`` columns are the
    client-shifted block. The same client mean ``mu_c`` centres both the
    personalized covariates and the personalized weights.

    Returns
    -------
    clients : list of ClientDataset
    truth : TrueModel
    """
    cfg.validate()
    d1, d2, m1, m2 = cfg.d1, cfg.d2, cfg.m1, cfg.m2
    g = derive_rng(cfg.seed, [("synth-global", 0)])
    W_sp = g.uniform(-0.1, 0.1, size=(m2, d1))
    W_ss = g.uniform(-1.0, 1.0, size=(m2, d2))
    W_shared = np.hstack([W_sp, W_ss])
    a = g.standard_normal(cfg.m)
    chol = np.linalg.cholesky(ar1_covariance(d1)) if d1 else np.zeros((0, 0))

    n_total = cfg.n_train + cfg.n_test
    W_personal, mus, Xs, latents = [], [], [], []
    for c in range(cfg.C):
        r = derive_rng(cfg.seed, [("synth-client", c)])
        mu = r.standard_normal(d1)
        W_pp = mu[None, :] + r.standard_normal((m1, d1))
        W_ps = r.uniform(-0.1, 0.1, size=(m1, d2))
        xp = mu[None, :] + r.standard_normal((n_total, d1)) @ chol.T
        xs = r.standard_normal((n_total, d2))
        X = np.hstack([xp, xs])
        W_c = np.vstack([np.hstack([W_pp, W_ps]), W_shared])
        ystar = np.maximum(X @ W_c.T, 0.0) @ a + cfg.noise_sd * r.standard_normal(n_total)
        W_personal.append(np.hstack([W_pp, W_ps]))
        mus.append(mu)
        Xs.append(X)
        latents.append(ystar)

    offset = float(np.median(np.concatenate(latents))) if cfg.center_labels else 0.0
    clients = []
    for c, (X, ystar) in enumerate(zip(Xs, latents)):
        # sigmoid(y* - offset) > 0.5  <=>  y* > offset
        y = (ystar > offset).astype(np.float64)
        clients.append(
            ClientDataset(
                client_id=c,
                X_train=X[: cfg.n_train],
                y_train=y[: cfg.n_train],
                X_test=X[cfg.n_train :],
                y_test=y[cfg.n_train :],
            )
        )
    truth = TrueModel(W_shared=W_shared, W_personal=W_personal, a=a, mu=mus, m1=m1, m2=m2, offset=offset)
    return clients, truth


def dirichlet_partition(labels, C: int, pi: float, rng: np.random.Generator) -> List[np.ndarray]:
    """
    Label-skewed split of sample indices across ``C`` clients.

    For every label value, client shares are drawn from a symmetric
    Dirichlet(pi) and that label's (shuffled) samples are allocated
    multinomially. The returned index arrays are sorted, disjoint and cover
    every index.
    """
    labels = np.asarray(labels)
    if labels.size == 0:
        raise ContractError("dirichlet_partition needs at least one label")
    if C < 1:
        raise ContractError("C must be >= 1")
    if not pi > 0:
        raise ContractError("pi must be > 0")
    buckets: List[List[np.ndarray]] = [[] for _ in range(C)]
    for value in np.unique(labels):
        idx = np.flatnonzero(labels == value)
        idx = idx[rng.permutation(idx.size)]
        shares = rng.dirichlet(np.full(C, float(pi)))
        counts = rng.multinomial(idx.size, shares)
        for c, chunk in enumerate(np.split(idx, np.cumsum(counts)[:-1])):
            buckets[c].append(chunk)
    return [np.sort(np.concatenate(b)).astype(np.int64) for b in buckets]


def iid_partition(n: int, C: int, rng: np.random.Generator) -> List[np.ndarray]:
    """Uniformly random near-equal split of ``range(n)`` into ``C`` parts."""
    return [np.sort(part) for part in np.array_split(rng.permutation(n), C)]


def train_test_split(
    X, y, ratio: float, rng: np.random.Generator, client_id: int = 0
) -> ClientDataset:
    """Random split with ``ceil(ratio * n)`` training rows and the rest for test."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n = len(y)
    if not 0.0 < ratio < 1.0:
        raise ContractError(f"ratio must lie in (0, 1), got {ratio}")
    if n < 2:
        raise ContractError("train_test_split needs at least 2 samples")
    n_train = min(math.ceil(ratio * n - 1e-9), n)
    perm = rng.permutation(n)
    tr, te = perm[:n_train], perm[n_train:]
    return ClientDataset(client_id, X[tr], y[tr], X[te], y[te])


def federate_pool(
    X, y, parts: Sequence[np.ndarray], ratio: float, seed: int
) -> List[ClientDataset]:
    """Turn index sets over a pooled dataset into per-client train/test splits."""
    clients = []
    for c, idx in enumerate(parts):
        rng = derive_rng(seed, [("split", c)])
        clients.append(train_test_split(np.asarray(X)[idx], np.asarray(y)[idx], ratio, rng, client_id=c))
    return clients


# ---------------------------------------------------------------------------
# CSV exchange format: client_id,split,y,x0..x{d-1}
# ---------------------------------------------------------------------------


def _fmt(v: float) -> str:
    return repr(float(v))


def write_federation_csv(path, clients: Sequence[ClientDataset]) -> None:
    d = clients[0].d
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["client_id", "split", "y"] + [f"x{i}" for i in range(d)])
        for ds in clients:
            for split, X, y in (("train", ds.X_train, ds.y_train), ("test", ds.X_test, ds.y_test)):
                for row, label in zip(X, y):
                    w.writerow([ds.client_id, split, _fmt(label)] + [_fmt(v) for v in row])


def read_federation_csv(path) -> List[ClientDataset]:
    rows: Dict[int, Dict[str, Tuple[list, list]]] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header[:3] != ["client_id", "split", "y"]:
            raise ContractError(f"{path}: unexpected header {header[:3]}")
        d = len(header) - 3
        for line in reader:
            if not line:
                continue
            cid, split = int(line[0]), line[1]
            if split not in ("train", "test"):
                raise ContractError(f"{path}: unknown split {split!r}")
            bucket = rows.setdefault(cid, {"train": ([], []), "test": ([], [])})[split]
            bucket[0].append([float(v) for v in line[3:]])
            bucket[1].append(float(line[2]))
    clients = []
    for cid in sorted(rows):
        tr, te = rows[cid]["train"], rows[cid]["test"]
        clients.append(
            ClientDataset(
                cid,
                np.array(tr[0]).reshape(-1, d),
                np.array(tr[1]),
                np.array(te[0]).reshape(-1, d),
                np.array(te[1]),
            )
        )
    return clients

"""
Communication rounds for FedAvg, FedSplit and the factor-assisted variants.

A round samples ``K`` clients, broadcasts the server's shared rows to them,
runs local gradient descent on each, keeps personalized rows on the clients
and folds the (weighted) mean of the shared deltas into the server model.

Algorithms
----------
fedavg          every unit is shared.
fedsplit_true   a partition supplied by the caller (e.g. the generator's truth).
fedfac_static   partition from one factor analysis of warm-up local models.
fedfac_dynamic  same initial partition, re-estimated after every round.
random_split    uniformly random partition with as many shared units as the
                warm-up factor analysis would have produced.
local_only      no aggregation at all; every client trains alone.

Every random draw comes from a stream derived from ``(seed, labels)``, and
client results are reduced in client-id order, so results do not depend on
the number of worker threads.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import facsplit
from .analysis import stability_fraction, weighted_accuracy
from .datagen import ClientDataset
from .facsplit import FactorConfig, Partition, TauSpec
from .model import (
    ModelConfig,
    SplitParams,
    accuracy,
    check_split_layers,
    init_params,
    loss,
    predict_score,
    run_local_epochs,
)
from .numerics import ContractError, derive_rng

log = logging.getLogger(__name__)

ALGORITHMS = ("fedavg", "fedsplit_true", "fedfac_static", "fedfac_dynamic", "random_split", "local_only")
WEIGHTINGS = ("sample_size", "uniform")
FA_INPUTS = ("weights", "deltas")


@dataclass
class FederationConfig:
    algorithm: str = "fedfac_dynamic"
    T: int = 50
    clients_per_round: Optional[int] = None
    participation_rate: float = 1.0
    local_epochs: int = 1
    batch_size: int = 50
    eta_l: float = 0.05
    eta_g: float = 1.0
    split_layers: Tuple[int, ...] = (1,)
    factor: FactorConfig = field(default_factory=FactorConfig)
    weighting: str = "sample_size"
    seed: int = 0
    init_local_epochs: int = 5
    fa_input: str = "weights"
    workers: int = 1
    # network
    hidden_widths: Tuple[int, ...] = (200,)
    loss: str = "binary_cross_entropy"
    init_scale: float = 1.0
    scale_by_sqrt_width: bool = True
    train_output_weights: bool = False

    def __post_init__(self):
        self.split_layers = tuple(int(l) for l in self.split_layers)
        self.hidden_widths = tuple(int(w) for w in self.hidden_widths)
        if isinstance(self.factor, dict):
            self.factor = FactorConfig(**self.factor)

    def validate(self, C: Optional[int] = None) -> None:
        if self.algorithm not in ALGORITHMS:
            raise ContractError(f"algorithm must be one of {ALGORITHMS}, got {self.algorithm!r}")
        if self.weighting not in WEIGHTINGS:
            raise ContractError(f"weighting must be one of {WEIGHTINGS}, got {self.weighting!r}")
        if self.fa_input not in FA_INPUTS:
            raise ContractError(f"fa_input must be one of {FA_INPUTS}, got {self.fa_input!r}")
        if self.T < 0:
            raise ContractError("T must be >= 0")
        if self.local_epochs < 1:
            raise ContractError("local_epochs must be >= 1")
        if self.init_local_epochs < 0:
            raise ContractError("init_local_epochs must be >= 0")
        if not self.eta_g > 0:
            raise ContractError("eta_g must be > 0")
        if self.batch_size < 1:
            raise ContractError("batch_size must be >= 1")
        if self.workers < 1:
            raise ContractError("workers must be >= 1")
        if self.clients_per_round is None and not 0.0 < self.participation_rate <= 1.0:
            raise ContractError("participation_rate must lie in (0, 1]")
        if C is not None:
            K = self.num_sampled(C)
            if not 1 <= K <= C:
                raise ContractError(f"clients_per_round must lie in [1, {C}], got {K}")

    def num_sampled(self, C: int) -> int:
        if self.clients_per_round is not None:
            return int(self.clients_per_round)
        return max(1, int(math.floor(self.participation_rate * C + 0.5)))

    def model_config(self, d: int) -> ModelConfig:
        return ModelConfig(
            layer_widths=[d, *self.hidden_widths, 1],
            loss=self.loss,
            scale_by_sqrt_width=self.scale_by_sqrt_width,
            train_output_weights=self.train_output_weights,
            init_scale=self.init_scale,
        )


@dataclass
class RoundRecord:
    t: int
    sampled: List[int]
    train_loss: float
    client_acc: Dict[int, float]
    client_n: Dict[int, int]
    weighted_acc: float
    partitions: Dict[int, Partition] = field(default_factory=dict)
    stability: Dict[int, float] = field(default_factory=dict)
    flips: Dict[int, int] = field(default_factory=dict)

    @property
    def min_client_acc(self) -> float:
        return float(min(self.client_acc.values())) if self.client_acc else float("nan")

    @property
    def max_client_acc(self) -> float:
        return float(max(self.client_acc.values())) if self.client_acc else float("nan")


@dataclass
class RunResult:
    config: FederationConfig
    model: ModelConfig
    records: List[RoundRecord]
    server: SplitParams
    clients: Dict[int, SplitParams]
    init_partitions: Dict[int, Partition]

    def __iter__(self):
        return iter(self.records)

    def __len__(self):
        return len(self.records)


# ---------------------------------------------------------------------------
# server-side primitives
# ---------------------------------------------------------------------------


def sample_clients(C: int, K: int, rng: np.random.Generator) -> List[int]:
    """``K`` distinct client indices drawn uniformly from ``range(C)``, sorted."""
    if not 1 <= K <= C:
        raise ContractError(f"need 1 <= K <= C, got K={K}, C={C}")
    if K == C:
        return list(range(C))
    return sorted(int(i) for i in rng.choice(C, size=K, replace=False))


def aggregate_shared(deltas: Sequence[np.ndarray], weights: Sequence[float]) -> np.ndarray:
    """Weighted mean of equally shaped deltas, summed in the given order."""
    if len(deltas) == 0:
        raise ContractError("nothing to aggregate")
    shape = np.shape(deltas[0])
    if any(np.shape(D) != shape for D in deltas):
        raise ContractError("all deltas must share the same shape")
    if len(weights) != len(deltas):
        raise ContractError("one weight per delta required")
    total = float(np.sum(weights))
    if not total > 0:
        raise ContractError("aggregation weights must sum to a positive value")
    acc = np.zeros(shape)
    for D, w in zip(deltas, weights):
        acc += (float(w) / total) * np.asarray(D, dtype=np.float64)
    return acc


def apply_global_update(W, delta, eta_g: float) -> np.ndarray:
    W = np.asarray(W, dtype=np.float64)
    delta = np.asarray(delta, dtype=np.float64)
    if W.shape != delta.shape:
        raise ContractError("update shape does not match parameters")
    return W + eta_g * delta


def _client_layer_matrix(params: SplitParams, layer: int) -> np.ndarray:
    # (d_in, d_l): column j holds the incoming weights of unit j
    return params.weights[layer - 1].T


def repartition_dynamic(
    layer: int,
    prev_mask: np.ndarray,
    fa_inputs: Sequence[np.ndarray],
    base_rows: Sequence[np.ndarray],
    weights: Sequence[float],
    server_W: np.ndarray,
    factor: FactorConfig,
) -> Tuple[Partition, np.ndarray, int]:
    """
    Re-estimate one layer's partition from the sampled clients' updates.

    Parameters
    ----------
    fa_inputs : per sampled client ``(d_in, d_l)`` factor-analysis input.
    base_rows : per sampled client ``(d_l, d_in)`` weights held *before* the
        local update; used to rebuild the server value of units that become
        shared.
    server_W : server weight matrix for the layer (rows of personalized
        units are ignored).

    Returns
    -------
    partition, reconciled server matrix, number of flipped units
    """
    if len(fa_inputs) < 2:
        raise ContractError("dynamic repartition needs updates from at least 2 clients")
    part = facsplit.decompose(fa_inputs, factor, layer_id=layer)
    new_mask = part.zeta
    W = np.array(server_W, dtype=np.float64, copy=True)
    joined = new_mask & ~prev_mask
    if joined.any():
        W[joined] = aggregate_shared([B[joined] for B in base_rows], weights)
    flips = int(np.sum(new_mask != prev_mask))
    return part, W, flips


# ---------------------------------------------------------------------------
# experiment driver
# ---------------------------------------------------------------------------


def _evaluate(
    mcfg: ModelConfig, clients: Dict[int, SplitParams], data: Dict[int, ClientDataset]
) -> Tuple[float, Dict[int, float], Dict[int, int]]:
    total, n_total = 0.0, 0
    accs, ns = {}, {}
    for cid in sorted(clients):
        ds = data[cid]
        total += loss(mcfg, clients[cid], ds.X_train, ds.y_train) * ds.n_c
        n_total += ds.n_c
        ns[cid] = ds.n_c
        if len(ds.y_test):
            accs[cid] = accuracy(mcfg, clients[cid], ds.X_test, ds.y_test)
    return total / n_total, accs, ns


def _weighted(accs: Dict[int, float], ns: Dict[int, int]) -> float:
    if not accs:
        return float("nan")
    return weighted_accuracy([(ns[c], accs[c]) for c in sorted(accs)])


def _factor_partitions(
    cfg: FederationConfig,
    mcfg: ModelConfig,
    server: SplitParams,
    data: Dict[int, ClientDataset],
    layers: Sequence[int],
) -> Dict[int, Partition]:
    """Warm-up local training of every client from the server draw, then one factor analysis per layer."""
    ids = sorted(data)
    if len(ids) < 2:
        raise ContractError("factor analysis needs at least 2 clients")
    probe: Dict[int, SplitParams] = {}
    deltas: Dict[int, SplitParams] = {}
    for cid in ids:
        ds = data[cid]
        rng = derive_rng(cfg.seed, [("warmup", cid)])
        probe[cid], deltas[cid] = run_local_epochs(
            mcfg, server, ds.X_train, ds.y_train, cfg.init_local_epochs,
            min(cfg.batch_size, ds.n_c), cfg.eta_l, rng,
        )
    source = probe if cfg.fa_input == "weights" else deltas
    return {
        l: facsplit.decompose([_client_layer_matrix(source[c], l) for c in ids], cfg.factor, layer_id=l)
        for l in layers
    }


def _initial_partitions(
    cfg: FederationConfig,
    mcfg: ModelConfig,
    server: SplitParams,
    data: Dict[int, ClientDataset],
    layers: Sequence[int],
    true_partition: Optional[Dict[int, np.ndarray]],
) -> Dict[int, Partition]:
    widths = mcfg.layer_widths
    alg = cfg.algorithm

    def fixed(l, zeta):
        zeta = np.asarray(zeta, dtype=bool)
        if zeta.shape != (widths[l],):
            raise ContractError(f"partition for layer {l} must have {widths[l]} entries")
        return Partition(layer_id=l, zeta=zeta.copy(), nu=np.full(widths[l], np.nan))

    if alg == "fedavg":
        return {l: fixed(l, np.ones(widths[l], bool)) for l in layers}
    if alg == "local_only":
        return {l: fixed(l, np.zeros(widths[l], bool)) for l in layers}
    if alg == "fedsplit_true":
        if true_partition is None:
            raise ContractError("fedsplit_true needs a true partition")
        missing = [l for l in layers if l not in true_partition]
        if missing:
            raise ContractError(f"true partition missing layers {missing}")
        return {l: fixed(l, true_partition[l]) for l in layers}
    parts = _factor_partitions(cfg, mcfg, server, data, layers)
    if alg == "random_split":
        out = {}
        for l, p in parts.items():
            rng = derive_rng(cfg.seed, [("random-split", l)])
            zeta = np.zeros(widths[l], bool)
            zeta[rng.choice(widths[l], size=int(p.zeta.sum()), replace=False)] = True
            out[l] = fixed(l, zeta)
        return out
    return parts


def run_experiment(
    cfg: FederationConfig,
    data: Sequence[ClientDataset],
    true_partition: Optional[Dict[int, np.ndarray]] = None,
    on_round=None,
    before_round=None,
) -> RunResult:
    """
    Run ``cfg.T`` communication rounds and return one record per round.

    ``records[0]`` describes the initial state; ``records[t]`` the state after
    round ``t``. ``true_partition`` maps split layers to boolean shared masks
    and is required by ``fedsplit_true``. ``on_round`` is called with each
    record as it is produced. ``before_round(t, clients)`` runs ahead of
    round ``t`` with the live ``{client_id: SplitParams}`` dict, which lets
    callers inject perturbations.
    """
    active = []
    for ds in data:
        if ds.n_c == 0:
            warnings.warn(f"client {ds.client_id} has no training data and is excluded", stacklevel=2)
        else:
            active.append(ds)
    if not active:
        raise ContractError("every client has an empty training set")
    ids = [ds.client_id for ds in active]
    if len(set(ids)) != len(ids):
        raise ContractError("client ids must be unique")
    by_id = {ds.client_id: ds for ds in active}
    C = len(active)
    cfg.validate(C)
    mcfg = cfg.model_config(active[0].d)
    layers = check_split_layers(mcfg, cfg.split_layers)
    aggregate = cfg.algorithm != "local_only"

    server = init_params(mcfg, layers, rng=derive_rng(cfg.seed, [("init", 0)]))
    init_parts = _initial_partitions(cfg, mcfg, server, by_id, layers, true_partition)
    for l, p in init_parts.items():
        server.shared[l] = p.zeta.copy()
    clients = {cid: server.copy(client_id=cid) for cid in sorted(by_id)}
    weights_of = {cid: (by_id[cid].n_c if cfg.weighting == "sample_size" else 1.0) for cid in by_id}
    current = {l: init_parts[l] for l in layers}

    train_loss, accs, ns = _evaluate(mcfg, clients, by_id)
    records = [RoundRecord(0, [], train_loss, accs, ns, _weighted(accs, ns), dict(current))]
    if on_round:
        on_round(records[0])
    order = sorted(by_id)
    K = cfg.num_sampled(C)
    pool = ThreadPoolExecutor(max_workers=cfg.workers) if cfg.workers > 1 else None
    try:
        for t in range(1, cfg.T + 1):
            if before_round:
                before_round(t, clients)
            sampled = [order[i] for i in sample_clients(C, K, derive_rng(cfg.seed, [("sample", t)]))]
            if aggregate:
                for cid in sampled:
                    _broadcast(server, clients[cid], mcfg)
            starts = {cid: clients[cid] for cid in sampled}

            def work(cid):
                ds = by_id[cid]
                rng = derive_rng(cfg.seed, [("round", t), ("client", cid)])
                return run_local_epochs(
                    mcfg, starts[cid], ds.X_train, ds.y_train, cfg.local_epochs,
                    min(cfg.batch_size, ds.n_c), cfg.eta_l, rng,
                )

            results = list(pool.map(work, sampled)) if pool else [work(c) for c in sampled]
            updated = {cid: r[0] for cid, r in zip(sampled, results)}
            deltas = {cid: r[1] for cid, r in zip(sampled, results)}
            wts = [weights_of[c] for c in sampled]

            stability, flips = {}, {}
            if cfg.algorithm == "fedfac_dynamic" and len(sampled) >= 2:
                for l in layers:
                    src = updated if cfg.fa_input == "weights" else deltas
                    prev = server.shared[l]
                    part, W_new, n_flip = repartition_dynamic(
                        l,
                        prev,
                        [_client_layer_matrix(src[c], l) for c in sampled],
                        [starts[c].weights[l - 1] for c in sampled],
                        wts,
                        server.weights[l - 1],
                        cfg.factor,
                    )
                    server.weights[l - 1] = W_new
                    stability[l] = stability_fraction(prev, part.zeta)
                    flips[l] = n_flip
                    current[l] = part
                    server.shared[l] = part.zeta.copy()
                    for cp in clients.values():
                        cp.shared[l] = part.zeta.copy()
                    for cp in updated.values():
                        cp.shared[l] = part.zeta.copy()
            else:
                for l in layers:
                    stability[l] = 1.0
                    flips[l] = 0

            if aggregate:
                for li in range(mcfg.n_hidden):
                    rows = server.shared_rows(li + 1)
                    if rows.any():
                        step = aggregate_shared([deltas[c].weights[li][rows] for c in sampled], wts)
                        server.weights[li][rows] = apply_global_update(server.weights[li][rows], step, cfg.eta_g)
                if mcfg.train_output_weights:
                    step = aggregate_shared([deltas[c].a for c in sampled], wts)
                    server.a = apply_global_update(server.a, step, cfg.eta_g)
                for cid in sampled:
                    _broadcast(server, updated[cid], mcfg)
            for cid in sampled:
                clients[cid] = updated[cid]

            train_loss, accs, ns = _evaluate(mcfg, clients, by_id)
            rec = RoundRecord(t, sampled, train_loss, accs, ns, _weighted(accs, ns),
                              dict(current), stability, flips)
            records.append(rec)
            if on_round:
                on_round(rec)
            log.debug("round %d loss=%.4f acc=%.4f", t, train_loss, rec.weighted_acc)
    finally:
        if pool:
            pool.shutdown()
    return RunResult(cfg, mcfg, records, server, clients, init_parts)


def _broadcast(server: SplitParams, client: SplitParams, mcfg: ModelConfig) -> None:
    """Overwrite the client's shared rows (and shared head) with the server's."""
    for li in range(mcfg.n_hidden):
        rows = server.shared_rows(li + 1)
        client.weights[li][rows] = server.weights[li][rows]
    if mcfg.train_output_weights:
        client.a = server.a.copy()
    for l, m in server.shared.items():
        client.shared[l] = m.copy()


# ---------------------------------------------------------------------------
# new clients and ablations
# ---------------------------------------------------------------------------


@dataclass
class Prediction:
    scores: np.ndarray
    labels: np.ndarray
    accuracy: float


def _fresh_personal(mcfg: ModelConfig, params: SplitParams, rng: np.random.Generator) -> SplitParams:
    out = params.copy()
    for l, mask in sorted(out.shared.items()):
        W = out.weights[l - 1]
        k = int((~mask).sum())
        W[~mask] = mcfg.init_scale * rng.standard_normal((k, W.shape[1]))
    return out


def predict_new_client_localtrain(
    mcfg: ModelConfig,
    server: SplitParams,
    new: ClientDataset,
    epochs: int,
    eta_l: float,
    rng: np.random.Generator,
    batch_size: Optional[int] = None,
    freeze_shared: bool = True,
) -> Tuple[Prediction, SplitParams]:
    """
    Fit personalized rows for an unseen client on top of the server's shared rows.

    The personalized rows start from a fresh ``N(0, init_scale^2)`` draw. With
    ``freeze_shared`` the shared rows (and every non-split layer) stay fixed.
    ``epochs=0`` gives the untrained baseline.
    """
    if new.n_c == 0:
        raise ContractError("new client has no training data; use the ensemble strategy instead")
    params = _fresh_personal(mcfg, server, rng)
    params.client_id = new.client_id
    if epochs:
        frozen = None
        if freeze_shared:
            frozen = {l: params.shared_rows(l) for l in range(1, mcfg.n_hidden + 1)}
        params, _ = run_local_epochs(
            mcfg, params, new.X_train, new.y_train, epochs,
            min(batch_size or new.n_c, new.n_c), eta_l, rng,
            frozen_rows=frozen, freeze_output=True if freeze_shared else None,
        )
    scores = predict_score(mcfg, params, new.X_test)
    labels = (scores > 0.5).astype(np.float64)
    acc = float(np.mean(labels == (new.y_test > 0.5))) if len(new.y_test) else float("nan")
    return Prediction(scores, labels, acc), params


def predict_new_client_ensemble(
    mcfg: ModelConfig, models: Sequence[SplitParams], new: ClientDataset
) -> Prediction:
    """Average the existing personalized models' scores; label 1 iff the mean exceeds 0.5."""
    if len(models) == 0:
        raise ContractError("ensemble needs at least one existing model")
    scores = np.zeros(len(new.y_test))
    for p in models:
        scores += predict_score(mcfg, p, new.X_test)
    scores /= len(models)
    labels = (scores > 0.5).astype(np.float64)
    acc = float(np.mean(labels == (new.y_test > 0.5))) if len(new.y_test) else float("nan")
    return Prediction(scores, labels, acc)


def mask_group(
    mcfg: ModelConfig,
    params: SplitParams,
    group: str,
    rng: np.random.Generator,
    layers: Optional[Sequence[int]] = None,
) -> SplitParams:
    """Replace the shared or personalized rows of split layers by fresh ``N(0, init_scale^2)`` draws."""
    if group not in ("shared", "personalized"):
        raise ContractError("group must be 'shared' or 'personalized'")
    if not params.shared:
        raise ContractError("model has no split layer")
    out = params.copy()
    for l in sorted(layers if layers is not None else out.shared):
        mask = out.shared[l] if group == "shared" else ~out.shared[l]
        W = out.weights[l - 1]
        k = int(mask.sum())
        if k:
            W[mask] = mcfg.init_scale * rng.standard_normal((k, W.shape[1]))
    return out


# ---------------------------------------------------------------------------
# run artifacts
# ---------------------------------------------------------------------------


def _num(v: float) -> str:
    return repr(float(v))


def write_metrics_csv(path, result: RunResult) -> None:
    """One row per completed round (the initial state is not a round)."""
    cfg = result.config
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["round", "algorithm", "seed", "train_loss", "weighted_acc", "min_client_acc", "max_client_acc"])
        for r in result.records[1:]:
            w.writerow([r.t, cfg.algorithm, cfg.seed, _num(r.train_loss), _num(r.weighted_acc),
                        _num(r.min_client_acc), _num(r.max_client_acc)])


def write_clients_csv(path, result: RunResult) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["round", "client_id", "n_c", "test_acc"])
        for r in result.records[1:]:
            for cid in sorted(r.client_acc):
                w.writerow([r.t, cid, r.client_n[cid], _num(r.client_acc[cid])])


def write_stability_csv(path, result: RunResult) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["round", "layer", "fraction_unchanged"])
        for r in result.records[1:]:
            for l in sorted(r.stability):
                w.writerow([r.t, l, _num(r.stability[l])])


def partition_document(result: RunResult) -> dict:
    def snap(parts):
        return {str(l): parts[l].to_dict() for l in sorted(parts)}

    return {
        "algorithm": result.config.algorithm,
        "layers": sorted(result.init_partitions),
        "init": snap(result.init_partitions),
        "rounds": [{"round": r.t, "layers": snap(r.partitions)} for r in result.records[1:]],
    }


def write_partition_json(path, result: RunResult) -> None:
    with open(path, "w", newline="\n") as fh:
        json.dump(partition_document(result), fh, indent=1, sort_keys=True)
        fh.write("\n")

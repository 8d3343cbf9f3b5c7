"""
Split ReLU multilayer perceptron.

Every hidden layer ``l`` (1-based) owns a weight matrix of shape
``(m_l, m_{l-1})``; row ``j`` is the incoming weight vector of unit ``j``.
Layers listed in the split set carry a boolean mask marking each unit as
client-shared (True) or personalized (False). There are no biases and the
scalar output is ``h = sum_j a_j * s_j * relu(z_j)`` over the last hidden
layer, where ``s_j`` is ``1/sqrt(m1)`` for personalized and ``1/sqrt(m2)``
for shared units when that layer is split and width scaling is on.

ReLU's derivative is taken as the indicator ``z >= 0``, i.e. active at zero.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .numerics import ContractError, rademacher, sym_eig

LOSSES = ("quadratic", "binary_cross_entropy")
PROB_CLAMP = 1e-12


@dataclass
class ModelConfig:
    layer_widths: List[int]
    loss: str = "binary_cross_entropy"
    scale_by_sqrt_width: bool = True
    train_output_weights: bool = False
    init_scale: float = 1.0

    def __post_init__(self):
        self.layer_widths = [int(w) for w in self.layer_widths]
        if len(self.layer_widths) < 3:
            raise ContractError("need an input width, at least one hidden width and the output width")
        if self.layer_widths[-1] != 1:
            raise ContractError("output width must be 1")
        if min(self.layer_widths) < 1:
            raise ContractError("all layer widths must be positive")
        if self.loss not in LOSSES:
            raise ContractError(f"loss must be one of {LOSSES}, got {self.loss!r}")
        if self.init_scale < 0:
            raise ContractError("init_scale must be >= 0")

    @property
    def n_hidden(self) -> int:
        return len(self.layer_widths) - 2

    @property
    def input_dim(self) -> int:
        return self.layer_widths[0]


@dataclass
class SplitParams:
    weights: List[np.ndarray]
    a: np.ndarray
    shared: Dict[int, np.ndarray] = field(default_factory=dict)
    client_id: Optional[int] = None

    def copy(self, client_id: Optional[int] = None) -> "SplitParams":
        return SplitParams(
            weights=[W.copy() for W in self.weights],
            a=self.a.copy(),
            shared={l: m.copy() for l, m in self.shared.items()},
            client_id=self.client_id if client_id is None else client_id,
        )

    def shared_rows(self, layer: int) -> np.ndarray:
        """Boolean row mask of units that the server aggregates in ``layer``."""
        W = self.weights[layer - 1]
        return self.shared.get(layer, np.ones(W.shape[0], dtype=bool))

    def flat(self) -> np.ndarray:
        return np.concatenate([W.ravel() for W in self.weights] + [self.a])


@dataclass
class Gradients:
    weights: List[np.ndarray]
    a: np.ndarray


@dataclass
class GramDiagnostics:
    H_s: np.ndarray
    H_p: np.ndarray
    lambda_s: float
    lambda_p: float
    mc_samples: int = 0
    se_lambda_s: float = 0.0
    se_lambda_p: float = 0.0
    entry_se: Optional[np.ndarray] = None


def check_split_layers(cfg: ModelConfig, layers: Iterable[int]) -> List[int]:
    layers = sorted({int(l) for l in layers})
    for l in layers:
        if l == cfg.n_hidden + 1:
            raise ContractError("the output layer is always shared and cannot be split")
        if not 1 <= l <= cfg.n_hidden:
            raise ContractError(f"split layer {l} outside hidden layers 1..{cfg.n_hidden}")
    return layers


def init_params(
    cfg: ModelConfig,
    split_layers: Iterable[int] = (),
    rng: Optional[np.random.Generator] = None,
    shared: Optional[Dict[int, np.ndarray]] = None,
) -> SplitParams:
    """
    Draw a server model: weights ~ N(0, init_scale^2), output weights uniform on {-1, +1}.

    ``shared`` optionally fixes the initial partition per split layer; units of
    split layers default to shared.
    """
    if rng is None:
        rng = np.random.default_rng()
    layers = check_split_layers(cfg, split_layers)
    widths = cfg.layer_widths
    weights = [cfg.init_scale * rng.standard_normal((widths[i + 1], widths[i])) for i in range(cfg.n_hidden)]
    a = rademacher(rng, widths[-2])
    masks = {}
    for l in layers:
        m = np.ones(widths[l], dtype=bool) if shared is None or l not in shared else np.asarray(shared[l], bool)
        if m.shape != (widths[l],):
            raise ContractError(f"partition for layer {l} has {m.size} entries, layer has {widths[l]} units")
        masks[l] = m.copy()
    return SplitParams(weights=weights, a=a, shared=masks)


def output_scale(cfg: ModelConfig, params: SplitParams) -> np.ndarray:
    """Per-unit prefactor applied to the last hidden layer in the output sum."""
    L = cfg.n_hidden
    m = cfg.layer_widths[L]
    if not cfg.scale_by_sqrt_width:
        return np.ones(m)
    if L in params.shared:
        mask = params.shared[L]
        n_s, n_p = int(mask.sum()), int((~mask).sum())
        scale = np.empty(m)
        scale[mask] = 1.0 / np.sqrt(n_s) if n_s else 0.0
        scale[~mask] = 1.0 / np.sqrt(n_p) if n_p else 0.0
        return scale
    return np.full(m, 1.0 / np.sqrt(m))


def _as_batch(cfg: ModelConfig, X) -> Tuple[np.ndarray, bool]:
    X = np.asarray(X, dtype=np.float64)
    single = X.ndim == 1
    X = np.atleast_2d(X)
    if X.shape[1] != cfg.input_dim:
        raise ContractError(f"input dimension {X.shape[1]} does not match model input {cfg.input_dim}")
    return X, single


def _layer_prefactor(cfg: ModelConfig, l: int) -> float:
    # 1/sqrt(fan_in) between hidden layers; the first layer is unscaled
    if l == 1 or not cfg.scale_by_sqrt_width:
        return 1.0
    return 1.0 / np.sqrt(cfg.layer_widths[l - 1])


def _forward_cache(cfg: ModelConfig, params: SplitParams, X: np.ndarray):
    pre, post = [], [X]
    z = X
    for l, W in enumerate(params.weights, start=1):
        u = _layer_prefactor(cfg, l) * (z @ W.T)
        z = np.maximum(u, 0.0)
        pre.append(u)
        post.append(z)
    coef = params.a * output_scale(cfg, params)
    return pre, post, post[-1] @ coef, coef


def forward(cfg: ModelConfig, params: SplitParams, X) -> np.ndarray:
    """Network output ``h`` (logit for cross-entropy) for one input or a batch."""
    X, single = _as_batch(cfg, X)
    h = _forward_cache(cfg, params, X)[2]
    return h[0] if single else h


def hidden_activations(cfg: ModelConfig, params: SplitParams, X, layer: int) -> np.ndarray:
    """Post-ReLU outputs of hidden ``layer`` for a batch, shape (n, m_layer)."""
    X, _ = _as_batch(cfg, X)
    if not 1 <= layer <= cfg.n_hidden:
        raise ContractError(f"layer {layer} is not a hidden layer")
    return _forward_cache(cfg, params, X)[1][layer]


def sigmoid(h) -> np.ndarray:
    h = np.asarray(h, dtype=np.float64)
    out = np.empty_like(h)
    pos = h >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-h[pos]))
    e = np.exp(h[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def predict_score(cfg: ModelConfig, params: SplitParams, X) -> np.ndarray:
    """Probability of label 1 under cross-entropy; raw output under quadratic loss."""
    h = forward(cfg, params, X)
    return sigmoid(h) if cfg.loss == "binary_cross_entropy" else np.asarray(h, dtype=np.float64)


def accuracy(cfg: ModelConfig, params: SplitParams, X, y) -> float:
    y = np.asarray(y)
    if y.size == 0:
        return float("nan")
    return float(np.mean((predict_score(cfg, params, X) > 0.5) == (y > 0.5)))


def loss_value(cfg: ModelConfig, h, y) -> float:
    h = np.asarray(h, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if y.size == 0:
        raise ContractError("loss of an empty dataset")
    if cfg.loss == "quadratic":
        return float(0.5 * np.mean((h - y) ** 2))
    p = np.clip(sigmoid(h), PROB_CLAMP, 1.0 - PROB_CLAMP)
    return float(-np.mean(y * np.log(p) + (1.0 - y) * np.log(1.0 - p)))


def loss(cfg: ModelConfig, params: SplitParams, X, y) -> float:
    """Quadratic ``(1/2n) sum (h - y)^2`` or mean binary cross-entropy."""
    X, _ = _as_batch(cfg, X)
    if X.shape[0] == 0:
        raise ContractError("loss of an empty dataset")
    return loss_value(cfg, forward(cfg, params, X), y)


def local_gradients(cfg: ModelConfig, params: SplitParams, X, y) -> Gradients:
    """Backpropagated gradient of the mean loss over the batch ``(X, y)``."""
    X, _ = _as_batch(cfg, X)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    n = X.shape[0]
    if n == 0:
        raise ContractError("gradient of an empty batch")
    if y.shape[0] != n:
        raise ContractError("label count does not match batch size")
    pre, post, h, coef = _forward_cache(cfg, params, X)
    if cfg.loss == "quadratic":
        dh = (h - y) / n
    else:
        dh = (sigmoid(h) - y) / n
    grads_w: List[np.ndarray] = [None] * cfg.n_hidden  # type: ignore[list-item]
    scale = output_scale(cfg, params)
    grad_a = scale * (post[-1].T @ dh)
    # gradient w.r.t. post-activation of the last hidden layer
    dz = np.outer(dh, coef)
    for l in range(cfg.n_hidden, 0, -1):
        du = dz * (pre[l - 1] >= 0.0)
        c = _layer_prefactor(cfg, l)
        grads_w[l - 1] = c * (du.T @ post[l - 1])
        if l > 1:
            dz = c * (du @ params.weights[l - 1])
    return Gradients(weights=grads_w, a=grad_a)


def run_local_epochs(
    cfg: ModelConfig,
    params: SplitParams,
    X,
    y,
    epochs: int,
    batch_size: int,
    lr: float,
    rng: np.random.Generator,
    frozen_rows: Optional[Dict[int, np.ndarray]] = None,
    freeze_output: Optional[bool] = None,
) -> Tuple[SplitParams, SplitParams]:
    """
    Minibatch gradient descent on one client's data.

    Each epoch reshuffles the training rows with ``rng`` and walks consecutive
    batches of ``batch_size`` (the last one may be short). ``frozen_rows``
    maps a hidden layer to a boolean mask of rows that must not move.

    Returns
    -------
    updated : SplitParams
        A new parameter object; ``params`` is left untouched.
    delta : SplitParams
        ``updated - params`` with the same partition masks.
    """
    X, _ = _as_batch(cfg, X)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    n = X.shape[0]
    if epochs < 0:
        raise ContractError("epochs must be >= 0")
    if epochs and not 1 <= batch_size <= n:
        raise ContractError(f"batch size must lie in [1, {n}], got {batch_size}")
    if freeze_output is None:
        freeze_output = not cfg.train_output_weights
    frozen_rows = frozen_rows or {}
    keep = {l: ~np.asarray(m, bool) for l, m in frozen_rows.items()}
    start = params
    cur = params.copy()
    if lr != 0.0:
        for _ in range(epochs):
            order = rng.permutation(n)
            for lo in range(0, n, batch_size):
                idx = order[lo : lo + batch_size]
                g = local_gradients(cfg, cur, X[idx], y[idx])
                for l, G in enumerate(g.weights, start=1):
                    if l in keep:
                        G = G * keep[l][:, None]
                    cur.weights[l - 1] -= lr * G
                if not freeze_output:
                    cur.a -= lr * g.a
    delta = SplitParams(
        weights=[W1 - W0 for W1, W0 in zip(cur.weights, start.weights)],
        a=cur.a - start.a,
        shared={l: m.copy() for l, m in start.shared.items()},
        client_id=start.client_id,
    )
    return cur, delta


# ---------------------------------------------------------------------------
# Gram / NTK diagnostics
# ---------------------------------------------------------------------------


def _block_mask(N: int, client_sets: Sequence[Sequence[int]]) -> np.ndarray:
    mask = np.zeros((N, N), dtype=bool)
    for idx in client_sets:
        idx = np.asarray(idx, dtype=np.int64)
        mask[np.ix_(idx, idx)] = True
    return mask


def _min_eig(H: np.ndarray) -> float:
    if H.size == 0:
        return float("nan")
    return float(sym_eig(H).eigenvalues[-1])


def _warn_norms(X: np.ndarray) -> None:
    if X.size and np.max(np.linalg.norm(X, axis=1)) > 1.0 + 1e-12:
        warnings.warn("some inputs have norm > 1; kernel bounds assume ||x|| <= 1", stacklevel=3)


def gram_matrices(
    X,
    client_sets: Sequence[Sequence[int]],
    W,
    shared_mask,
    personal_weights: Optional[Sequence[np.ndarray]] = None,
) -> GramDiagnostics:
    """
    Finite-width shared and personalized Gram matrices of a first layer.

    ``W`` is the ``(m, d)`` first-layer matrix whose shared rows define the
    shared kernel. Personalized rows for the samples of client ``c`` come from
    ``personal_weights[c]`` when given, otherwise from ``W``. The personalized
    matrix is zero outside within-client blocks.
    """
    X = np.asarray(X, dtype=np.float64)
    W = np.asarray(W, dtype=np.float64)
    shared_mask = np.asarray(shared_mask, dtype=bool)
    _warn_norms(X)
    N = X.shape[0]
    G = X @ X.T
    Ws = W[shared_mask]
    m2 = Ws.shape[0]
    if m2:
        A = (X @ Ws.T >= 0).astype(np.float64)
        H_s = G * (A @ A.T) / m2
    else:
        H_s = np.zeros((N, N))
    m1 = int((~shared_mask).sum())
    H_p = np.zeros((N, N))
    if m1 == 0:
        warnings.warn("no personalized units; personalized Gram matrix is zero", stacklevel=2)
    else:
        for c, idx in enumerate(client_sets):
            idx = np.asarray(idx, dtype=np.int64)
            Wc = W if personal_weights is None else np.asarray(personal_weights[c], dtype=np.float64)
            Wp = Wc[~shared_mask]
            A = (X[idx] @ Wp.T >= 0).astype(np.float64)
            H_p[np.ix_(idx, idx)] = G[np.ix_(idx, idx)] * (A @ A.T) / m1
    return GramDiagnostics(H_s=H_s, H_p=H_p, lambda_s=_min_eig(H_s), lambda_p=_min_eig(H_p))


def arccos_kernel(X) -> np.ndarray:
    """Closed form of ``E_w[x_i.x_j 1{w.x_i >= 0, w.x_j >= 0}]`` for ``w ~ N(0, I)``."""
    X = np.asarray(X, dtype=np.float64)
    G = X @ X.T
    norms = np.linalg.norm(X, axis=1)
    denom = np.outer(norms, norms)
    cos = np.divide(G, denom, out=np.ones_like(G), where=denom > 0)
    return G * (np.pi - np.arccos(np.clip(cos, -1.0, 1.0))) / (2.0 * np.pi)


def ntk_limit_estimate(
    X,
    client_sets: Sequence[Sequence[int]],
    mc_samples: int,
    rng: np.random.Generator,
    n_batches: int = 10,
) -> GramDiagnostics:
    """
    Monte-Carlo estimate of the infinite-width shared and personalized kernels.

    The personalized kernel reuses the same Gaussian draws masked to
    within-client blocks, so it is exactly the block-diagonal restriction of
    the shared estimate. Standard errors of the smallest eigenvalues come from
    ``n_batches`` independent batch means; ``entry_se`` is the per-entry
    binomial standard error.
    """
    if mc_samples < 1000:
        raise ContractError("mc_samples must be >= 1000")
    X = np.asarray(X, dtype=np.float64)
    _warn_norms(X)
    N, d = X.shape
    G = X @ X.T
    block = _block_mask(N, client_sets)
    sizes = np.full(n_batches, mc_samples // n_batches)
    sizes[: mc_samples % n_batches] += 1
    counts = np.zeros((N, N))
    lam_s, lam_p = [], []
    for size in sizes:
        w = rng.standard_normal((d, int(size)))
        A = (X @ w >= 0).astype(np.float64)
        c = A @ A.T
        counts += c
        Hb = G * c / size
        lam_s.append(_min_eig(Hb))
        lam_p.append(_min_eig(np.where(block, Hb, 0.0)))
    freq = counts / mc_samples
    H_s = G * freq
    H_p = np.where(block, H_s, 0.0)
    entry_se = np.abs(G) * np.sqrt(freq * (1.0 - freq) / mc_samples)
    se = lambda v: float(np.std(v, ddof=1) / np.sqrt(len(v))) if len(v) > 1 else 0.0
    return GramDiagnostics(
        H_s=H_s,
        H_p=H_p,
        lambda_s=_min_eig(H_s),
        lambda_p=_min_eig(H_p),
        mc_samples=int(mc_samples),
        se_lambda_s=se(lam_s),
        se_lambda_p=se(lam_p),
        entry_se=entry_se,
    )


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_FORMAT = "fedfac-checkpoint/1"


def checkpoint_dict(cfg: ModelConfig, params: SplitParams) -> dict:
    """JSON-ready document holding the architecture, partition and weights."""
    return {
        "format": CHECKPOINT_FORMAT,
        "client_id": params.client_id,
        "model": {
            "layer_widths": cfg.layer_widths,
            "loss": cfg.loss,
            "scale_by_sqrt_width": cfg.scale_by_sqrt_width,
            "train_output_weights": cfg.train_output_weights,
            "init_scale": cfg.init_scale,
        },
        "shared": {str(l): m.astype(int).tolist() for l, m in sorted(params.shared.items())},
        "weights": [W.tolist() for W in params.weights],
        "output_weights": params.a.tolist(),
    }


def params_from_dict(doc: dict) -> Tuple[ModelConfig, SplitParams]:
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ContractError(f"not a checkpoint document: format={doc.get('format')!r}")
    cfg = ModelConfig(**doc["model"])
    weights = [np.asarray(W, dtype=np.float64).reshape(cfg.layer_widths[i + 1], cfg.layer_widths[i])
               for i, W in enumerate(doc["weights"])]
    params = SplitParams(
        weights=weights,
        a=np.asarray(doc["output_weights"], dtype=np.float64),
        shared={int(l): np.asarray(m, dtype=bool) for l, m in doc["shared"].items()},
        client_id=doc.get("client_id"),
    )
    return cfg, params


def save_checkpoint(path, cfg: ModelConfig, params: SplitParams) -> None:
    with open(path, "w") as fh:
        json.dump(checkpoint_dict(cfg, params), fh)
        fh.write("\n")


def load_checkpoint(path) -> Tuple[ModelConfig, SplitParams]:
    with open(path) as fh:
        return params_from_dict(json.load(fh))

"""Sequential-emulation reference with exact Hessians.

Running minibatches one after another differs from combining gradients
computed at a common point because later gradients are stale. A first-order
Taylor correction removes the staleness: the gradient of batch ``i`` at the
already-updated point is approximated by ``g_i + H_i (w - w0)``. With exact
Hessians this gives a reference against which combined updates (adaptive sum,
plain sum) can be scored.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .combiner import adasum_tree, orthogonality
from .errors import ConfigError, ShapeError, UndefinedMetricError
from .training.data import Dataset, make_dataset, shard
from .training.models import LogisticRegression

MAX_ANALYTIC_FEATURES = 64
MAX_FD_PARAMS = 200


def exact_hessian(model, params, X, y, mode: str = "analytic", ridge: float = 0.0,
                  step: float = 1e-5) -> np.ndarray:
    """Hessian of the mean batch loss at ``params``.

    ``mode="analytic"`` is available for :class:`LogisticRegression`;
    ``mode="finite_difference"`` differentiates ``model.loss_and_grad`` by
    central differences and works for any model up to 200 parameters. The
    result is symmetrized.
    """
    params = np.asarray(params, dtype=np.float64)
    if mode == "analytic":
        if not isinstance(model, LogisticRegression):
            raise ConfigError("analytic Hessian is only available for logistic regression")
        if model.n_features > MAX_ANALYTIC_FEATURES:
            raise ConfigError(f"analytic Hessian limited to {MAX_ANALYTIC_FEATURES} features")
        return model.hessian(params, X, y, ridge=ridge)
    if mode != "finite_difference":
        raise ValueError(f"unknown Hessian mode {mode!r}")
    n = params.shape[0]
    if n > MAX_FD_PARAMS:
        raise ConfigError(f"finite-difference Hessian limited to {MAX_FD_PARAMS} parameters")
    H = np.empty((n, n))
    for j in range(n):
        e = np.zeros(n)
        e[j] = step
        gp = model.loss_and_grad(params + e, X, y)[1]
        gm = model.loss_and_grad(params - e, X, y)[1]
        H[:, j] = (gp - gm) / (2.0 * step)
    if ridge:
        H += ridge * np.eye(n)
    return 0.5 * (H + H.T)


def sequential_emulation_step(w0, g1, g2, H2, alpha: float) -> np.ndarray:
    """Two-step emulation: ``w0 - alpha*(g1 + g2 - alpha*H2 g1)``."""
    w0, g1, g2 = (np.asarray(v, dtype=np.float64) for v in (w0, g1, g2))
    H2 = np.asarray(H2, dtype=np.float64)
    if not (w0.shape == g1.shape == g2.shape) or H2.shape != (w0.shape[0],) * 2:
        raise ShapeError("inconsistent shapes")
    return w0 - alpha * (g1 + g2 - alpha * (H2 @ g1))


def sequential_emulation(w0, grads, hessians, alpha: float) -> np.ndarray:
    """Fold gradients in order, correcting each by its Hessian times the update so far."""
    w0 = np.asarray(w0, dtype=np.float64)
    update = np.zeros_like(w0)
    for g, H in zip(grads, hessians):
        corrected = np.asarray(g, dtype=np.float64) + np.asarray(H) @ update
        update = update - alpha * corrected
    return w0 + update


def two_step_sgd(model, w0, batch1, batch2, alpha: float) -> np.ndarray:
    """Plain sequential SGD: a step on ``batch1``, then a step on ``batch2`` at the new point."""
    w1 = w0 - alpha * model.loss_and_grad(w0, *batch1)[1]
    return w1 - alpha * model.loss_and_grad(w1, *batch2)[1]


def taylor_remainder(model, w0, batch1, batch2, alpha: float) -> float:
    """Error of the first-order estimate of the second gradient.

    Equals ``|w2_emulated - w2_sgd| / alpha``, i.e. the norm of
    ``g2(w1) - (g2 - alpha H2 g1)``, which is second order in ``alpha``.
    """
    w0 = np.asarray(w0, dtype=np.float64)
    g1 = model.loss_and_grad(w0, *batch1)[1]
    g2 = model.loss_and_grad(w0, *batch2)[1]
    H2 = exact_hessian(model, w0, *batch2)
    emulated = sequential_emulation_step(w0, g1, g2, H2, alpha)
    return float(np.linalg.norm(emulated - two_step_sgd(model, w0, batch1, batch2, alpha))) / alpha


def ggt_approx_step(w0, g1, g2, alpha: float) -> np.ndarray:
    """Emulation with the Hessian replaced by ``g2 g2^T`` at the optimal rate.

    Returns ``w0 - alpha*(g1 + g2 - (g2.g1 / |g2|^2) g2)``; averaging this
    with the swapped order gives ``w0 - alpha*adasum(g1, g2)``.
    """
    w0, g1, g2 = (np.asarray(v, dtype=np.float64) for v in (w0, g1, g2))
    n2 = float(g2 @ g2)
    if n2 == 0.0:
        return w0 - alpha * g1
    return w0 - alpha * (g1 + g2 - (float(g2 @ g1) / n2) * g2)


@dataclass
class SeqErrorConfig:
    ranks: int = 16
    steps: int = 200
    batch_size: int = 8
    lr: float = 1.0
    seed: int = 0
    n_features: int = 16
    n_samples: int = 20000
    separation: float = 1.0
    per_layer: bool = True
    # Trajectory the snapshots are taken from: "adasum", "sum" or "oracle".
    advance: str = "adasum"


CSV_COLUMNS = ("step", "rel_err_adasum", "rel_err_sum", "grad_norm_mean", "orthogonality",
               "cum_rel_err_adasum", "cum_rel_err_sum", "skipped")


def relative_error_experiment(cfg: SeqErrorConfig, data: Dataset | None = None) -> list[dict]:
    """Score adaptive-sum and plain-sum updates against exact-Hessian emulation.

    At each communication step every rank draws a minibatch from its shard and
    computes its gradient and exact Hessian at the shared point ``w0``. The
    reference folds the ranks in rank order. Rows carry per-step errors
    ``|delta_method - delta_ref| / |delta_ref|`` and cumulative ratios of
    summed error norms to summed reference norms.
    """
    if cfg.ranks > 16 or cfg.ranks < 1:
        raise ConfigError("relative-error experiment supports 1..16 ranks")
    if data is None:
        data = make_dataset("gauss_blobs", cfg.seed, n_samples=cfg.n_samples,
                            n_features=cfg.n_features, n_classes=2, separation=cfg.separation)
    model = LogisticRegression(data.X.shape[1])
    layout = model.layout if cfg.per_layer else None
    rng = np.random.default_rng([cfg.seed, 1])
    shards = [shard(len(data), r, cfg.ranks, 0, cfg.seed) for r in range(cfg.ranks)]
    w = model.init_params(rng)
    rows = []
    cum = np.zeros(3)
    for step in range(1, cfg.steps + 1):
        grads, hessians = [], []
        for r in range(cfg.ranks):
            idx = rng.choice(shards[r], size=cfg.batch_size, replace=False)
            X, y = data.X[idx], data.y[idx]
            grads.append(model.loss_and_grad(w, X, y)[1])
            hessians.append(exact_hessian(model, w, X, y))
        d_ref = sequential_emulation(w, grads, hessians, cfg.lr) - w
        d_ada = -cfg.lr * adasum_tree(grads, layout)
        d_sum = -cfg.lr * np.sum(grads, axis=0)
        ref_norm = float(np.linalg.norm(d_ref))
        try:
            orth = orthogonality(grads, layout)
        except UndefinedMetricError:
            orth = float("nan")
        row = {"step": step, "grad_norm_mean": float(np.mean([np.linalg.norm(g) for g in grads])),
               "orthogonality": orth}
        if ref_norm == 0.0:
            row.update(rel_err_adasum=float("nan"), rel_err_sum=float("nan"), skipped=1)
        else:
            e_ada = float(np.linalg.norm(d_ada - d_ref))
            e_sum = float(np.linalg.norm(d_sum - d_ref))
            cum += (e_ada, e_sum, ref_norm)
            row.update(rel_err_adasum=e_ada / ref_norm, rel_err_sum=e_sum / ref_norm, skipped=0)
        row.update(cum_rel_err_adasum=cum[0] / cum[2] if cum[2] else float("nan"),
                   cum_rel_err_sum=cum[1] / cum[2] if cum[2] else float("nan"))
        rows.append({k: row[k] for k in CSV_COLUMNS})
        if cfg.advance == "adasum":
            w = w + d_ada
        elif cfg.advance == "sum":
            w = w + d_sum / cfg.ranks
        elif cfg.advance == "oracle":
            w = w + d_ref
        else:
            raise ConfigError(f"unknown trajectory {cfg.advance!r}")
    return rows

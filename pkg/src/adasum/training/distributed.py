"""Data-parallel training with reduction applied after the optimizer step.

Each rank snapshots the parameters, runs ``local_steps`` optimizer steps on
its own microbatches, and allreduces the resulting parameter delta (the
effective gradient). Because the optimizer only ever sees one rank's small
batches, the same wrapper serves SGD, momentum, Adam and LAMB unchanged.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field, fields
from typing import Any, Callable

import numpy as np

from ..collective import RankContext, adasum_rvh, hierarchical_adasum, run_ranks, sum_allreduce, sum_rvh
from ..collective.ops import check_consistent, is_power_of_two
from ..errors import ConfigError, ConsistencyError, NumericError
from ..precision import ScaleState, check_and_update, scaled_cast
from .data import Dataset, epoch_batches, steps_per_epoch
from .models import Model, make_model
from .optim import LinearWarmupDecay, Optimizer, make_optimizer


@dataclass
class TrainConfig:
    ranks: int = 1
    batch_size: int = 32
    local_steps: int = 1
    reduction: str = "adasum"
    precision: str = "f64"
    seed: int = 0
    epochs: float = 2
    model: str = "mlp"
    hidden: int = 32
    optimizer: str = "momentum"
    max_lr: float = 0.05
    warmup_frac: float = 0.17
    node_size: int = 1
    transport: str = "inproc"
    loss_scale_init: float = 2.0 ** 15
    loss_scale_growth_interval: int = 2000
    track_orthogonality: bool = False
    debug: bool = False
    log_every: int = 1
    # Communication steps at which rank 0 blows up its delta (overflow tests).
    inject_overflow_at: tuple = ()

    def validate(self) -> None:
        if not is_power_of_two(self.ranks):
            raise ConfigError(f"ranks must be a power of two, got {self.ranks}")
        if self.local_steps < 1:
            raise ConfigError("local_steps must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.reduction not in ("sum", "adasum"):
            raise ConfigError(f"unknown reduction {self.reduction!r}")
        if self.precision not in ("f64", "f16"):
            raise ConfigError(f"unknown precision {self.precision!r}")
        if self.ranks % self.node_size or not is_power_of_two(self.node_size):
            raise ConfigError(f"node_size {self.node_size} must be a power of two dividing ranks")
        if self.epochs <= 0:
            raise ConfigError("epochs must be positive")

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass
class StepResult:
    params: np.ndarray
    accepted: bool = True
    orthogonality: np.ndarray | None = None
    local_loss: float = float("nan")


def params_fingerprint(params: np.ndarray) -> int:
    return zlib.crc32(np.ascontiguousarray(params, dtype="<f8").tobytes())


def _allreduce(ctx: RankContext, payload: np.ndarray, model: Model, reduction: str, node_size: int):
    if reduction == "sum":
        return sum_rvh(ctx, payload)
    if node_size > 1:
        return hierarchical_adasum(ctx, payload, model.layout, node_size)
    return adasum_rvh(ctx, payload, model.layout)


def _orthogonality(ctx, model, delta, combined):
    """Per-layer ``|adasum|^2 / sum_i |delta_i|^2``, completed across ranks."""
    own = np.array([float(s @ s) for s in model.layout.split(delta)])
    denom = sum_allreduce(ctx, own)
    num = np.array([float(s @ s) for s in model.layout.split(combined)])
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(denom > 0, num / denom, np.nan)


def distributed_step(ctx: RankContext, model: Model, params: np.ndarray, opt: Optimizer,
                     batches, cfg: TrainConfig, scaler: ScaleState | None = None,
                     step_index: int = 0) -> StepResult:
    """One communication round: local optimizer steps, then reduce the delta.

    ``batches`` is a sequence of ``(X, y)`` microbatches, one per local step.
    A rejected half-precision step returns the starting parameters unchanged.
    """
    start = np.array(params, dtype=np.float64, copy=True)
    if cfg.debug and not check_consistent(ctx, params_fingerprint(start)):
        raise ConsistencyError(f"rank {ctx.rank}: parameters diverged before step {step_index}")

    w = start
    losses = []
    for X, y in batches:
        loss, grad = model.loss_and_grad(w, X, y)
        losses.append(loss)
        w = opt.step(w, grad)
    local_loss = float(np.mean(losses)) if losses else float("nan")
    delta = w - start

    if ctx.size == 1 and cfg.precision == "f64":
        orth = np.ones(model.layout.n_layers) if cfg.track_orthogonality else None
        return StepResult(w, True, orth, local_loss)

    if cfg.precision == "f16":
        if scaler is None:
            raise ConfigError("f16 communication needs a ScaleState")
        outgoing = delta * 1e12 if (step_index in cfg.inject_overflow_at and ctx.rank == 0) else delta
        payload = scaled_cast(outgoing, scaler)
    else:
        if not np.isfinite(delta).all():
            raise NumericError(f"rank {ctx.rank}: non-finite effective gradient")
        payload = delta

    reduced = _allreduce(ctx, payload, model, cfg.reduction, cfg.node_size)

    if cfg.precision == "f16":
        reduced = check_and_update(reduced, scaler)
        if reduced is None:
            return StepResult(start, False, None, local_loss)
    elif not np.isfinite(reduced).all():
        raise NumericError("non-finite reduced update")

    orth = None
    if cfg.track_orthogonality:
        combined = reduced if cfg.reduction == "adasum" else adasum_rvh(ctx, delta, model.layout)
        orth = _orthogonality(ctx, model, delta, combined)
    if cfg.reduction == "sum":
        reduced = reduced / ctx.size
    return StepResult(start + reduced, True, orth, local_loss)


METRIC_COLUMNS = ("step", "epoch", "rank_count", "reduction", "local_steps", "train_loss",
                  "eval_accuracy", "lr", "orthogonality_mean", "scale")


@dataclass
class TrainResult:
    params: np.ndarray
    history: list[dict] = field(default_factory=list)
    allreduce_calls: int = 0
    accepted_steps: int = 0
    rejected_steps: int = 0
    orthogonality: list[np.ndarray] = field(default_factory=list)
    scale: float | None = None

    @property
    def final_accuracy(self) -> float:
        return self.history[-1]["eval_accuracy"] if self.history else float("nan")

    @property
    def final_loss(self) -> float:
        return self.history[-1]["train_loss"] if self.history else float("nan")


def plan(cfg: TrainConfig, n_train: int) -> tuple[int, int, int]:
    """``(comm_steps_per_epoch, n_epochs, total_optimizer_steps)`` for this config.

    Fractional epochs truncate the last epoch.
    """
    per_epoch = steps_per_epoch(n_train, cfg.ranks, cfg.batch_size) // cfg.local_steps
    if per_epoch < 1:
        raise ConfigError("dataset too small for this rank count and batch size")
    total_comm = max(1, int(round(cfg.epochs * per_epoch)))
    n_epochs = -(-total_comm // per_epoch)
    return per_epoch, n_epochs, total_comm * cfg.local_steps


def train_worker(ctx: RankContext, cfg: TrainConfig, model: Model, train: Dataset,
                 test: Dataset | None = None, on_row: Callable[[dict], None] | None = None) -> TrainResult:
    """SPMD training loop; every rank runs this, rank 0 records metrics.

    ``on_row`` is called on rank 0 with each metrics row as it is produced.
    """
    per_epoch, n_epochs, total_steps = plan(cfg, len(train))
    total_comm = total_steps // cfg.local_steps
    params = model.init_params(np.random.default_rng(cfg.seed))
    opt = make_optimizer(cfg.optimizer, LinearWarmupDecay(cfg.max_lr, cfg.warmup_frac, total_steps),
                         model.layout)
    scaler = (ScaleState(scale=cfg.loss_scale_init, growth_interval=cfg.loss_scale_growth_interval)
              if cfg.precision == "f16" else None)
    test = test if test is not None else train
    result = TrainResult(params)
    comm = 0
    for epoch in range(n_epochs):
        batches = epoch_batches(len(train), ctx.rank, ctx.size, epoch, cfg.seed, cfg.batch_size)
        for c in range(per_epoch):
            if comm >= total_comm:
                break
            group = batches[c * cfg.local_steps:(c + 1) * cfg.local_steps]
            step = distributed_step(ctx, model, params, opt,
                                    [(train.X[i], train.y[i]) for i in group], cfg, scaler, comm)
            params = step.params
            comm += 1
            result.allreduce_calls += 1 if ctx.size > 1 or cfg.precision == "f16" else 0
            if step.accepted:
                result.accepted_steps += 1
            else:
                result.rejected_steps += 1
            if step.orthogonality is not None:
                result.orthogonality.append(step.orthogonality)
            if ctx.rank == 0 and (comm % cfg.log_every == 0 or comm == total_comm):
                row = {
                    "step": comm,
                    "epoch": epoch,
                    "rank_count": ctx.size,
                    "reduction": cfg.reduction,
                    "local_steps": cfg.local_steps,
                    "train_loss": model.loss(params, train.X, train.y),
                    "eval_accuracy": model.accuracy(params, test.X, test.y),
                    "lr": opt.last_lr,
                    "orthogonality_mean": (float(np.nanmean(step.orthogonality))
                                           if step.orthogonality is not None else float("nan")),
                    "scale": scaler.scale if scaler is not None else 1.0,
                }
                result.history.append(row)
                if on_row is not None:
                    on_row(row)
    result.params = params
    result.scale = scaler.scale if scaler is not None else None
    return result


def train(cfg: TrainConfig, train_set: Dataset, test_set: Dataset | None = None,
          model: Model | None = None, on_row: Callable[[dict], None] | None = None,
          **run_kwargs: Any) -> TrainResult:
    """Run :func:`train_worker` on ``cfg.ranks`` simulated ranks; return rank 0's result."""
    cfg.validate()
    if model is None:
        model = make_model(cfg.model, train_set.X.shape[1], train_set.n_classes, cfg.hidden)
    results = run_ranks(cfg.ranks, lambda ctx: train_worker(ctx, cfg, model, train_set, test_set, on_row),
                        transport=cfg.transport, **run_kwargs)
    return results[0]
